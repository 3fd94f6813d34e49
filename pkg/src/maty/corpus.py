"""Bundled example protocols and programs."""

from __future__ import annotations

from pathlib import Path

CORPUS_DIR = Path(__file__).parent / "corpus"


def corpus_files() -> list[str]:
    return sorted(p.name for p in CORPUS_DIR.iterdir() if p.suffix in (".scr", ".mpst", ".maty"))


def corpus_path(name: str) -> Path:
    path = CORPUS_DIR / name
    if not path.is_file():
        raise FileNotFoundError(f"no bundled example named {name}")
    return path


def read(name: str) -> str:
    return corpus_path(name).read_text(encoding="utf-8")
