"""Token vocabulary, paired conditionings (identifier vs class word), caption manifests.

There is no text transformer: a caption is a fixed-length sequence of token ids
and its conditioning is a row lookup in a learned embedding table. Personal
identifiers ("V*") live in a separate table so they can train while every
pretrained token stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from aptdiff.errors import (
    DuplicateIdentifierError,
    EmptyInputError,
    LogParseError,
    PlaceholderError,
    RangeError,
    TokenError,
)

PLACEHOLDER = "{}"
BOS, PAD = "<bos>", "<pad>"


class Vocabulary(nn.Module):
    def __init__(self, tokens, token_dim: int, context_len: int = 8, generator: torch.Generator | None = None):
        super().__init__()
        tokens = [BOS, PAD] + [t for t in tokens if t not in (BOS, PAD)]
        if len(set(tokens)) != len(tokens):
            raise DuplicateIdentifierError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.token_dim = token_dim
        self.context_len = context_len
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.base = nn.Parameter(torch.randn(len(tokens), token_dim, generator=generator) * 0.5)
        self.ident = nn.Parameter(torch.zeros(0, token_dim))
        self.identifiers: dict[str, str] = {}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def is_frozen(self, token: str) -> bool:
        return token not in self.identifiers

    def token_id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise TokenError(f"unknown token {token!r}") from None

    def register_identifier(self, identifier: str, class_word: str) -> None:
        """Add ``identifier`` as a trainable copy of ``class_word``'s embedding."""
        if identifier in self.index:
            raise DuplicateIdentifierError(f"{identifier!r} is already in the vocabulary")
        if class_word not in self.index or class_word in self.identifiers:
            raise TokenError(f"unknown class word {class_word!r}")
        row = self.base.detach()[self.index[class_word]].clone()
        self.ident = nn.Parameter(torch.cat([self.ident.detach(), row[None]], dim=0))
        self.index[identifier] = len(self.tokens)
        self.tokens.append(identifier)
        self.identifiers[identifier] = class_word

    def freeze_base(self, frozen: bool = True) -> None:
        self.base.requires_grad_(not frozen)

    def trainable_params(self) -> list[nn.Parameter]:
        return [self.ident] if self.identifiers else []

    def table(self) -> torch.Tensor:
        return torch.cat([self.base, self.ident], dim=0)

    def embed(self, ids) -> torch.Tensor:
        """Row lookup; accepts (L,) or (B, L) ids and keeps their order."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() == 0:
            return torch.zeros(*ids.shape, self.token_dim)
        if int(ids.min()) < 0 or int(ids.max()) >= len(self.tokens):
            raise TokenError(f"token id out of range [0, {len(self.tokens)})")
        return self.table()[ids]

    def encode(self, text: str) -> torch.Tensor:
        """Whitespace tokenize, prepend <bos>, pad to ``context_len``."""
        words = text.split()
        if len(words) + 1 > self.context_len:
            raise RangeError(f"caption has {len(words)} words; context holds {self.context_len - 1}")
        ids = [self.index[BOS]] + [self.token_id(w) for w in words]
        ids += [self.index[PAD]] * (self.context_len - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def null_tokens(self) -> torch.Tensor:
        return self.encode("")

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in torch.as_tensor(ids).tolist() if self.tokens[i] not in (BOS, PAD))

    def spec(self) -> dict:
        return {
            "tokens": self.tokens[: self.base.shape[0]],
            "identifiers": dict(self.identifiers),
            "token_dim": self.token_dim,
            "context_len": self.context_len,
        }


@dataclass(frozen=True)
class ConditioningPair:
    tokens_star: torch.Tensor
    tokens_class: torch.Tensor
    null_tokens: torch.Tensor
    position: int

    def __eq__(self, other):
        if not isinstance(other, ConditioningPair):
            return NotImplemented
        return (
            self.position == other.position
            and torch.equal(self.tokens_star, other.tokens_star)
            and torch.equal(self.tokens_class, other.tokens_class)
        )

    __hash__ = None


def fill_template(template: str, word: str) -> str:
    words = template.split()
    if template.count(PLACEHOLDER) != 1 or words.count(PLACEHOLDER) != 1:
        raise PlaceholderError(f"template must contain exactly one standalone {PLACEHOLDER!r}: {template!r}")
    return " ".join(word if w == PLACEHOLDER else w for w in words)


def build_pair(template: str, identifier: str, class_word: str, vocab: Vocabulary) -> ConditioningPair:
    """Token sequences for ``c*`` (identifier) and ``c`` (class word) from one caption template."""
    star = vocab.encode(fill_template(template, identifier))
    cls = vocab.encode(fill_template(template, class_word))
    position = template.split().index(PLACEHOLDER) + 1  # +1 for <bos>
    return ConditioningPair(star, cls, vocab.null_tokens(), position)


# Caption manifest: UTF-8 text, one record per line, three TAB-separated fields
#   <image path>\t<class word>\t<caption template with one {} placeholder>
# Blank lines and lines starting with '#' are ignored; relative image paths are
# resolved against the manifest's directory.


@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    class_word: str
    template: str


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise LogParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        image, class_word, template = (p.strip() for p in parts)
        try:
            fill_template(template, class_word)
        except PlaceholderError as exc:
            raise LogParseError(f"{path}:{lineno}: {exc}") from None
        image_path = Path(image)
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        records.append(ManifestRecord(image_path, class_word, template))
    if not records:
        raise EmptyInputError(f"{path}: manifest has no records")
    return records


def write_manifest(path, records) -> None:
    path = Path(path)
    lines = ["# image_path\tclass_word\tcaption_template"]
    for r in records:
        image = Path(r.image_path)
        try:
            image = image.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{image}\t{r.class_word}\t{r.template}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
