"""Model checkpoints: network config, base weights, adapters and token tables in one file.

Layout (a safetensors container):

* bytes 0-7: little-endian u64 ``N``, length of the JSON header;
* bytes 8..8+N: JSON header mapping each tensor name to dtype, shape and byte
  offsets, plus a ``__metadata__`` object of string values;
* remaining bytes: raw little-endian tensor data, in header order.

Tensor names are ``base/<param>`` (prior network), ``adapter/<param>``
(low-rank factors, absent when rank is 0), ``vocab/base`` (frozen token
table) and ``vocab/ident`` (learned identifier rows). ``__metadata__`` keys:

* ``format`` = ``"aptdiff-checkpoint"`` and ``version`` = ``"1"``;
* ``net_config``: JSON of :class:`NetConfig`;
* ``vocab``: JSON with ``tokens``, ``identifiers`` (identifier -> class word),
  ``token_dim`` and ``context_len``;
* ``adapter_rank``, ``adapter_scale``: decimal strings;
* ``extra``: free-form JSON (training step, source prior, ...).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from aptdiff.cond import Vocabulary
from aptdiff.errors import CheckpointError, ConfigMismatchError
from aptdiff.tinynet import NetConfig, TinyUNet

FORMAT = "aptdiff-checkpoint"
VERSION = "1"


@dataclass
class ModelBundle:
    net: TinyUNet
    vocab: Vocabulary
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> NetConfig:
        return self.net.config


def save_checkpoint(path, bundle: ModelBundle) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"base/{k}": v.detach().contiguous() for k, v in bundle.net.base_state().items()}
    tensors.update({f"adapter/{k}": v.detach().contiguous() for k, v in bundle.net.adapter_state().items()})
    tensors["vocab/base"] = bundle.vocab.base.detach().contiguous()
    tensors["vocab/ident"] = bundle.vocab.ident.detach().contiguous()
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "net_config": json.dumps(bundle.net.config.to_dict(), sort_keys=True),
        "vocab": json.dumps(bundle.vocab.spec(), sort_keys=True),
        "adapter_rank": str(bundle.net.adapter_rank),
        "adapter_scale": repr(bundle.net.adapter_scale),
        "extra": json.dumps(bundle.extra, sort_keys=True),
    }
    save_file(tensors, str(path), metadata=meta)
    return path


def read_metadata(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as f:
            n = int.from_bytes(f.read(8), "little")
            header = json.loads(f.read(n))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint header {path}: {exc}") from exc
    meta = header.get("__metadata__") or {}
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    return meta


def load_checkpoint(path, expect_config: NetConfig | None = None) -> ModelBundle:
    """Rebuild the network and vocabulary; refuses files whose NetConfig differs from ``expect_config``."""
    meta = read_metadata(path)
    config = NetConfig.from_dict(json.loads(meta["net_config"]))
    if expect_config is not None and config != expect_config:
        raise ConfigMismatchError(f"{path}: checkpoint NetConfig {config} != expected {expect_config}")
    try:
        tensors = load_file(str(path))
    except (SafetensorError, OSError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    vspec = json.loads(meta["vocab"])
    vocab = Vocabulary(vspec["tokens"], vspec["token_dim"], vspec["context_len"])
    with torch.no_grad():
        vocab.base.copy_(tensors["vocab/base"])
    ident = tensors["vocab/ident"]
    for identifier, class_word in vspec["identifiers"].items():
        vocab.register_identifier(identifier, class_word)
    vocab.ident = torch.nn.Parameter(ident.clone())

    net = TinyUNet(config)
    rank = int(meta["adapter_rank"])
    net.attach_adapters(rank)
    state = {k[len("base/"):]: v for k, v in tensors.items() if k.startswith("base/")}
    state.update({k[len("adapter/"):]: v for k, v in tensors.items() if k.startswith("adapter/")})
    missing, unexpected = net.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"{path}: weight names do not match config (missing={missing}, unexpected={unexpected})")
    net.set_adapter_scale(float(meta["adapter_scale"]))
    net.eval()
    return ModelBundle(net, vocab, json.loads(meta.get("extra", "{}")))


def base_checksum(net: TinyUNet) -> str:
    """Digest of the prior weights; changes iff any base parameter or buffer changes."""
    h = hashlib.sha256()
    for k, v in sorted(net.base_state().items()):
        h.update(k.encode())
        h.update(v.detach().contiguous().numpy().tobytes())
    return h.hexdigest()
