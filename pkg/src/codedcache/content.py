"""Directory-backed video store split into fixed-size symbols."""

from __future__ import annotations

import os
import threading
from pathlib import Path
from typing import Dict, Iterable, Union

from .model import DEFAULT_SYMBOL_SIZE, SymbolId
from .placement import CacheContents, Catalog


class ContentStore:
    """Every regular file in ``root`` is a video named by its file name.

    Symbols are read on first use and kept in memory. The final symbol of a
    file is zero-padded to ``symbol_size``.
    """

    def __init__(self, root: Union[str, os.PathLike], symbol_size: int = DEFAULT_SYMBOL_SIZE):
        if symbol_size < 1:
            raise ValueError("symbol_size must be positive")
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"content directory {self.root} does not exist")
        self.symbol_size = symbol_size
        lengths = {p.name: p.stat().st_size for p in self.root.iterdir() if p.is_file()}
        self.catalog = Catalog.for_files(lengths, symbol_size)
        self._symbols: Dict[SymbolId, bytes] = {}
        self._lock = threading.Lock()

    def read(self, s: SymbolId) -> bytes:
        block = self._symbols.get(s)
        if block is not None:
            return block
        if not self.catalog.has_symbol(s):
            raise KeyError(f"symbol {s} is not in the catalog")
        with open(self.root / s.video_id, "rb") as f:
            f.seek(s.seq * self.symbol_size)
            block = f.read(self.symbol_size)
        block = block.ljust(self.symbol_size, b"\0")
        with self._lock:
            self._symbols[s] = block
        return block

    def load(self, held: Iterable[SymbolId]) -> Dict[SymbolId, bytes]:
        """Payloads for ``held``, read video by video without caching."""
        out: Dict[SymbolId, bytes] = {}
        by_video: Dict[str, list] = {}
        for s in held:
            by_video.setdefault(s.video_id, []).append(s.seq)
        for vid, seqs in by_video.items():
            data = (self.root / vid).read_bytes()
            size = self.symbol_size
            for seq in seqs:
                out[SymbolId(vid, seq)] = data[seq * size:(seq + 1) * size].ljust(size, b"\0")
        return out

    def fill(self, cache: CacheContents) -> CacheContents:
        cache.payloads = self.load(cache.held)
        return cache
