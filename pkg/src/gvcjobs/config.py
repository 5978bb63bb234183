"""Plain-text ``key = value`` configuration blocks.

A file is a sequence of lines ``key = value``; ``#`` starts a comment.
``[name]`` opens a named block; lines before the first block belong to the
unnamed preamble. Lists are comma separated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, source: str, line: int, message: str):
        super().__init__(f"{source}:{line}: {message}")
        self.source = source
        self.line = line


@dataclass
class Block:
    name: str | None
    line: int
    entries: dict[str, tuple[str, int]] = field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.entries[key][0] if key in self.entries else default


def parse_blocks(text: str, source: str = "<config>") -> list[Block]:
    blocks = [Block(None, 0)]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(source, lineno, f"malformed block header {raw.strip()!r}")
            name = line[1:-1].strip()
            if any(b.name == name for b in blocks):
                raise ConfigError(source, lineno, f"duplicate block [{name}]")
            blocks.append(Block(name, lineno))
            continue
        if "=" not in line:
            raise ConfigError(source, lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(source, lineno, "empty key")
        block = blocks[-1]
        if key in block.entries:
            raise ConfigError(source, lineno, f"duplicate key {key!r}")
        block.entries[key] = (value, lineno)
    return blocks


def read_blocks(path) -> list[Block]:
    p = Path(path)
    return parse_blocks(p.read_text(encoding="utf-8"), str(p))


def split_list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())
