"""Evaluation of personalized checkpoints against their prior.

* :func:`delta_noise` - mean squared gap between prior and tuned noise
  predictions on a fixed probe set (trajectory-drift diagnostic).
* :func:`gamma_report` - per-bin indicator curves rebuilt from an indicator log.
* :func:`sample` - ancestral sampling with classifier-free guidance.
* :func:`run_ablation_suite` - the four cumulative ablation variants side by side.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from aptdiff import corpus as corpus_mod
from aptdiff.ckpt import ModelBundle, load_checkpoint
from aptdiff.cond import fill_template
from aptdiff.config import ABLATION_LABELS, ABLATIONS, ExperimentConfig
from aptdiff.errors import EmptyInputError, LogParseError, RangeError, TokenError
from aptdiff.indicator import INDICATOR_COLUMNS
from aptdiff.sched import cfg_combine, make_schedule, q_sample, respace, sample_step
from aptdiff.trainer import make_generator, personalize

CONVENTIONS = ("train", "shared")


@dataclass
class ProbeSet:
    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    templates: list[str]
    seed: int

    def __len__(self):
        return self.x0.shape[0]


def make_probe_set(corpus: corpus_mod.Corpus, n: int = 64, bins: int = 10, T: int = 1000, seed: int = 0,
                   class_word: str | None = None) -> ProbeSet:
    """``n`` fixed (x0, eps, t, caption) tuples with timesteps stratified over ``bins``.

    When ``class_word`` is given, only corpus items of that class are used so the
    identifier substitution yields a meaningful caption.
    """
    if n < 1:
        raise EmptyInputError("probe set must be non-empty")
    pool = [i for i, c in enumerate(corpus.class_words) if class_word is None or c == class_word]
    if not pool:
        raise EmptyInputError(f"no corpus items of class {class_word!r}")
    g = make_generator(seed, "probes")
    pick = torch.tensor(pool)[torch.randint(len(pool), (n,), generator=g)]
    width = T // bins
    strata = torch.arange(n) % bins
    t = strata * width + torch.randint(width, (n,), generator=g)
    x0 = corpus.images[pick]
    eps = torch.randn(x0.shape, generator=g)
    return ProbeSet(x0, eps, t, [corpus.templates[i] for i in pick.tolist()], seed)


@torch.no_grad()
def delta_noise(bundle: ModelBundle | str | Path, probes: ProbeSet, convention: str = "train",
                batch_size: int = 32) -> float:
    """Mean over probes of the per-element MSE between prior and tuned noise predictions.

    ``convention="train"`` evaluates the prior with the class caption and the
    tuned model with the identifier caption (as in training); ``"shared"``
    gives both the class caption. The prior is always the adapters-off pass.
    """
    if convention not in CONVENTIONS:
        raise RangeError(f"convention must be one of {CONVENTIONS}; role swapping is not supported")
    if len(probes) == 0:
        raise EmptyInputError("probe set is empty")
    if not isinstance(bundle, ModelBundle):
        bundle = load_checkpoint(bundle)
    net, vocab = bundle.net, bundle.vocab
    if not vocab.identifiers:
        # nothing personalized: the tuned model is the prior by construction
        return 0.0
    identifier, class_word = next(iter(vocab.identifiers.items()))
    tuned_word = identifier if convention == "train" else class_word
    schedule = make_schedule(net.config.num_timesteps)
    total = 0.0
    for s in range(0, len(probes), batch_size):
        sl = slice(s, s + batch_size)
        t = probes.t[sl]
        x_t = q_sample(probes.x0[sl], probes.eps[sl], t, schedule)
        ids_c = torch.stack([vocab.encode(fill_template(tp, class_word)) for tp in probes.templates[sl]])
        ids_t = torch.stack([vocab.encode(fill_template(tp, tuned_word)) for tp in probes.templates[sl]])
        e_phi = net(x_t, t, vocab.embed(ids_c), adapters_on=False)
        e_theta = net(x_t, t, vocab.embed(ids_t), adapters_on=True)
        total += float((e_phi - e_theta).pow(2).flatten(1).mean(dim=1).sum())
    return total / len(probes)


# ---------------------------------------------------------------------------
# indicator curves


@dataclass
class GammaReport:
    steps: np.ndarray  # (S,) step numbers
    curves: np.ndarray  # (B, S) gamma of each bin after each step
    final: np.ndarray  # (B,)
    first_above_half: list  # per bin: first step with gamma > 0.5, or None

    def summary_rows(self) -> list[dict]:
        return [{"bin": b, "final_gamma": float(self.final[b]), "first_step_above_0.5": self.first_above_half[b]}
                for b in range(len(self.final))]


def read_indicator_log(path) -> list[tuple[int, int, float]]:
    path = Path(path)
    rows = []
    with path.open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != INDICATOR_COLUMNS:
            raise LogParseError(f"{path}:1: expected header {','.join(INDICATOR_COLUMNS)}")
        for lineno, r in enumerate(reader, start=2):
            try:
                if len(r) != len(INDICATOR_COLUMNS):
                    raise ValueError(f"expected {len(INDICATOR_COLUMNS)} fields")
                step, b, g = int(r[0]), int(r[1]), float(r[4])
                if not math.isfinite(g):
                    raise ValueError("non-finite gamma")
            except ValueError as exc:
                raise LogParseError(f"{path}:{lineno}: {exc}") from None
            rows.append((step, b, g))
    return rows


def gamma_report(log_path, bins: int = 10, out_dir=None) -> GammaReport:
    """Per-bin gamma-vs-step curves (bins hold their last value between updates)."""
    rows = read_indicator_log(log_path)
    n_steps = max((r[0] for r in rows), default=0)
    steps = np.arange(1, n_steps + 1)
    curves = np.zeros((bins, n_steps))
    current = np.zeros(bins)
    by_step = {}
    for step, b, g in rows:
        if not 0 <= b < bins:
            raise LogParseError(f"{log_path}: bin {b} outside [0, {bins})")
        by_step.setdefault(step, []).append((b, g))
    for i, s in enumerate(steps):
        for b, g in by_step.get(int(s), ()):
            current[b] = g
        curves[:, i] = current
    final = curves[:, -1].copy() if n_steps else np.zeros(bins)
    first = []
    for b in range(bins):
        hit = np.nonzero(curves[b] > 0.5)[0]
        first.append(int(steps[hit[0]]) if hit.size else None)
    report = GammaReport(steps, curves, final, first)
    if out_dir is not None:
        write_gamma_report(report, out_dir)
    return report


def write_gamma_report(report: GammaReport, out_dir, title: str = "overfitting indicator per timestep bin"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "gamma_summary.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin", "final_gamma", "first_step_above_0.5"])
        for r in report.summary_rows():
            w.writerow([r["bin"], repr(r["final_gamma"]), "" if r["first_step_above_0.5"] is None
                        else r["first_step_above_0.5"]])
    with (out_dir / "gamma_curves.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step"] + [f"bin{b}" for b in range(report.curves.shape[0])])
        for i, s in enumerate(report.steps):
            w.writerow([int(s)] + [repr(float(v)) for v in report.curves[:, i]])
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    cmap = plt.get_cmap("viridis")
    B = report.curves.shape[0]
    for b in range(B):
        ax.plot(report.steps, report.curves[b], color=cmap(b / max(1, B - 1)), lw=1.2, label=f"bin {b}")
    ax.set_xlabel("training step")
    ax.set_ylabel("gamma")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend(fontsize=6, ncol=2, loc="lower right")
    fig.tight_layout()
    fig.savefig(out_dir / "gamma_curves.png", metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# sampling


@torch.no_grad()
def sample(bundle: ModelBundle | str | Path, caption: str, n: int = 4, guidance_scale: float = 7.5,
           seed: int = 0, steps: int | None = None, out_path=None) -> torch.Tensor:
    """Ancestral sampling from pure noise with classifier-free guidance.

    ``steps`` < T samples on an evenly respaced sub-schedule. Returns (n, C, H, W)
    images in [-1, 1]; with ``out_path`` also writes them as a PNG grid.
    """
    if n < 1:
        raise RangeError("n must be >= 1")
    if not isinstance(bundle, ModelBundle):
        bundle = load_checkpoint(bundle)
    net, vocab = bundle.net, bundle.vocab
    cfg = net.config
    try:
        cond = vocab.embed(vocab.encode(caption))
    except KeyError as exc:
        raise TokenError(f"caption {caption!r}: {exc}") from None
    uncond = vocab.embed(vocab.null_tokens())
    ctx = torch.stack([uncond] * n + [cond] * n)
    full = make_schedule(cfg.num_timesteps)
    schedule, timesteps = respace(full, steps or full.T)
    g = make_generator(seed, "sample")
    x = torch.randn(n, cfg.in_channels, cfg.image_size, cfg.image_size, generator=g)
    for i in reversed(range(schedule.T)):
        eps = net(torch.cat([x, x]), int(timesteps[i]), ctx, adapters_on=True)
        e_u, e_c = eps[:n], eps[n:]
        x = sample_step(x, cfg_combine(e_u, e_c, guidance_scale), i, schedule, g, clip_x0=True)
    x = x.clamp(-1.0, 1.0)
    if out_path is not None:
        save_grid(x, out_path)
    return x


def make_grid(images: torch.Tensor, ncol: int | None = None, pad: int = 1) -> torch.Tensor:
    n, c, h, w = images.shape
    ncol = ncol or int(math.ceil(math.sqrt(n)))
    nrow = int(math.ceil(n / ncol))
    grid = torch.ones(c, nrow * (h + pad) + pad, ncol * (w + pad) + pad)
    for k in range(n):
        r, q = divmod(k, ncol)
        grid[:, pad + r * (h + pad): pad + r * (h + pad) + h, pad + q * (w + pad): pad + q * (w + pad) + w] = images[k]
    return grid


def save_grid(images: torch.Tensor, path) -> None:
    corpus_mod.save_png(make_grid(images), path)


# ---------------------------------------------------------------------------
# ablation


ABLATION_COLUMNS = ("variant", "label", "ata", "rs", "aa", "steps", "delta_noise_first", "delta_noise_final",
                    "delta_noise_increasing", "mean_final_gamma", "mean_L_DM_theta_last100", "augmented")


def checkpoint_series(run_dir) -> list[tuple[int, Path]]:
    files = sorted(Path(run_dir, "checkpoints").glob("step_*.safetensors"))
    return [(int(p.stem.split("_")[1]), p) for p in files]


def delta_noise_series(run_dir, probes: ProbeSet, convention: str = "train") -> list[tuple[int, float]]:
    return [(step, delta_noise(p, probes, convention)) for step, p in checkpoint_series(run_dir)]


def run_ablation_suite(cfg: ExperimentConfig, prior: ModelBundle, references: torch.Tensor, templates: list[str],
                       out_dir, corpus: corpus_mod.Corpus | None = None, variants=tuple(ABLATIONS),
                       progress=None) -> list[dict]:
    """Train each cumulative variant with shared seeds; write ``ablation.csv`` and per-variant gamma plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus = corpus_mod.make_corpus(cfg.pretrain.corpus_size, cfg.net.image_size, cfg.pretrain.corpus_seed)
    probes = make_probe_set(corpus, 64, cfg.apt.bins, cfg.pretrain.T, seed=cfg.apt.seed,
                            class_word=cfg.apt.class_word)
    rows = []
    for name in variants:
        vcfg = replace(cfg, apt=cfg.apt.with_ablation(name))
        run_dir = out_dir / name
        _, reports = personalize(prior, references, templates, vcfg, run_dir=run_dir, progress=progress)
        series = delta_noise_series(run_dir, probes)
        report = gamma_report(run_dir / "indicator_log.csv", cfg.apt.bins, out_dir=run_dir / "gamma")
        tail = reports[-100:]
        ata, rs, aa = ABLATIONS[name]
        rows.append({
            "variant": name,
            "label": ABLATION_LABELS[name],
            "ata": int(ata), "rs": int(rs), "aa": int(aa),
            "steps": vcfg.apt.steps,
            "delta_noise_first": series[0][1] if series else 0.0,
            "delta_noise_final": series[-1][1] if series else 0.0,
            "delta_noise_increasing": int(len(series) > 1 and series[-1][1] > series[0][1]),
            "mean_final_gamma": float(report.final.mean()),
            "mean_L_DM_theta_last100": sum(r.loss_theta for r in tail) / len(tail) if tail else 0.0,
            "augmented": sum(r.aug_applied for r in reports),
        })
    with (out_dir / "ablation.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in ABLATION_COLUMNS])
    return rows
