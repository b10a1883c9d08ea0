"""Prior pretraining and adaptive personalized training (APT).

Personalization runs the same network twice per step: adapters on with the
identifier caption (the tuned model) and adapters off with the class-word
caption (the frozen prior). The prior pass supplies the reference loss for the
overfitting indicator and the target statistics for the regularizers.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from aptdiff import corpus as corpus_mod
from aptdiff.augment import AugmentPolicy, maybe_augment
from aptdiff.ckpt import ModelBundle, base_checksum, save_checkpoint
from aptdiff.cond import Vocabulary, build_pair
from aptdiff.config import AptConfig, ExperimentConfig, PretrainConfig, dump_config
from aptdiff.csvlog import CsvLog
from aptdiff.errors import AptError, EmptyInputError, NonFiniteLossError, RangeError
from aptdiff.indicator import (
    BinMap,
    IndicatorLog,
    IndicatorState,
    adaptive_weight,
    augment_probability,
    temperature_for,
)
from aptdiff.reg import RegWeights, attn_align_loss, stat_losses, total_loss
from aptdiff.sched import make_schedule, q_sample
from aptdiff.tinynet import NetConfig, TinyUNet

log = logging.getLogger(__name__)


def derive_seed(seed: int, stream: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def make_generator(seed: int, stream: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, stream))


# ---------------------------------------------------------------------------
# pretraining


def init_prior(net_config: NetConfig, words, seed: int) -> ModelBundle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "init"))
        net = TinyUNet(net_config)
    vocab = Vocabulary(words, net_config.token_dim, net_config.context_len,
                       generator=make_generator(seed, "vocab"))
    return ModelBundle(net, vocab, {"kind": "prior", "steps": 0, "seed": seed})


def denoising_loss(net, vocab, x0, ids, t, eps, schedule) -> torch.Tensor:
    x_t = q_sample(x0, eps, t, schedule)
    return F.mse_loss(net(x_t, t, vocab.embed(ids)), eps)


def pretrain(corpus: corpus_mod.Corpus, net_config: NetConfig, steps: int, seed: int,
             cfg: PretrainConfig | None = None, progress=None) -> ModelBundle:
    """Train the prior's base weights and token table with the plain denoising loss.

    Captions are replaced by the null caption with probability
    ``cfg.cond_dropout`` so classifier-free guidance has an unconditional branch.
    """
    if len(corpus) == 0:
        raise EmptyInputError("pretraining corpus is empty")
    cfg = cfg or PretrainConfig()
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    bundle = init_prior(net_config, corpus_mod.vocabulary_words(), seed)
    net, vocab = bundle.net, bundle.vocab
    ids = torch.stack([vocab.encode(c) for c in corpus.captions()])
    null = vocab.null_tokens()
    data_rng, noise_rng = make_generator(seed, "data"), make_generator(seed, "noise")
    opt = torch.optim.AdamW(list(net.parameters()) + list(vocab.parameters()), lr=cfg.lr, weight_decay=1e-4)
    warmup = min(200, max(1, steps // 10))

    def lr_at(step):
        if step < warmup:
            return (step + 1) / warmup
        frac = (step - warmup) / max(1, steps - warmup)
        return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac))

    sched_lr = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    net.train()
    for step in range(steps):
        idx = torch.randint(len(corpus), (cfg.batch_size,), generator=data_rng)
        batch_ids = ids[idx].clone()
        drop = torch.rand(cfg.batch_size, generator=data_rng) < cfg.cond_dropout
        batch_ids[drop] = null
        t = torch.randint(cfg.T, (cfg.batch_size,), generator=noise_rng)
        x0 = corpus.images[idx]
        eps = torch.randn(x0.shape, generator=noise_rng)
        loss = denoising_loss(net, vocab, x0, batch_ids, t, eps, schedule)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(net.parameters()) + list(vocab.parameters()), 1.0)
        opt.step()
        sched_lr.step()
        if progress is not None:
            progress(step + 1, loss.item())
    net.eval()
    bundle.extra.update({"steps": steps, "pretrain": asdict(cfg)})
    return bundle


@torch.no_grad()
def validation_loss(bundle: ModelBundle, corpus: corpus_mod.Corpus, n: int = 128, seed: int = 1234,
                    T: int = 1000) -> float:
    """Mean denoising loss on a fixed draw of (image, noise, t) from ``corpus``."""
    schedule = make_schedule(T)
    g = make_generator(seed, "validation")
    n = min(n, len(corpus))
    idx = torch.randperm(len(corpus), generator=g)[:n]
    t = torch.randint(T, (n,), generator=g)
    eps = torch.randn(corpus.images[idx].shape, generator=g)
    ids = torch.stack([bundle.vocab.encode(c) for c in corpus.captions()])[idx]
    return float(denoising_loss(bundle.net, bundle.vocab, corpus.images[idx], ids, t, eps, schedule))


# ---------------------------------------------------------------------------
# personalization

TRAIN_COLUMNS = ("step", "t", "bin", "L_DM_theta", "L_DM_phi", "gamma", "weight", "L_mu", "L_sigma",
                 "L_attn", "total", "aug_p", "aug_applied", "aug_scale", "aug_angle")


@dataclass
class StepReport:
    step: int
    t: int
    bin: int
    loss_theta: float
    loss_phi: float
    gamma: float  # value consumed by this step (stored after the previous one)
    weight: float
    l_mu: float
    l_sigma: float
    l_attn: float
    total: float
    aug_p: float
    aug_applied: int
    aug_scale: float
    aug_angle: float
    gammas: tuple = field(default=(), repr=False)  # per-bin snapshot after this step's update

    def row(self) -> list:
        return [self.step, self.t, self.bin, self.loss_theta, self.loss_phi, self.gamma, self.weight,
                self.l_mu, self.l_sigma, self.l_attn, self.total, self.aug_p, self.aug_applied,
                self.aug_scale, self.aug_angle]


@dataclass
class RunState:
    step: int
    indicator: IndicatorState
    rng: dict
    optimizer: dict
    metrics: dict
    adapters: dict
    identifier_rows: torch.Tensor
    base_checksum: str

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "step": self.step,
            "indicator": self.indicator.state_dict(),
            "rng": self.rng,
            "optimizer": self.optimizer,
            "metrics": self.metrics,
            "adapters": self.adapters,
            "identifier_rows": self.identifier_rows,
            "base_checksum": self.base_checksum,
        }, path)
        return path

    @classmethod
    def load(cls, path) -> "RunState":
        d = torch.load(path, weights_only=False)
        d["indicator"] = IndicatorState.from_state_dict(d["indicator"])
        return cls(**d)


class Personalizer:
    """Holds the tuned model, indicator and rng streams for one personalization run."""

    def __init__(self, prior: ModelBundle, references: torch.Tensor, templates: list[str],
                 config: AptConfig, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if prior is None:
            raise AptError("personalization needs a pretrained prior")
        if references.ndim != 4 or not 1 <= references.shape[0] <= 10:
            raise RangeError("need 1-10 reference images shaped (N, C, H, W)")
        if len(templates) != references.shape[0]:
            raise RangeError("one caption template per reference image")
        self.config = config
        self.schedule = make_schedule(T, beta_start, beta_end)
        self.binmap = BinMap(T, config.bins)
        self.policy = AugmentPolicy(config.scale_range, config.rotation_range, config.aug_fill, config.p_max)
        self.weights = RegWeights(config.lambda_dist, config.lambda_attn)

        self.bundle = copy.deepcopy(prior)
        self.bundle.extra = {"kind": "personalized", "step": 0, "ablation": config.ablation,
                             "prior_checksum": base_checksum(prior.net)}
        net, vocab = self.bundle.net, self.bundle.vocab
        if config.identifier not in vocab:
            vocab.register_identifier(config.identifier, config.class_word)
        net.attach_adapters(config.adapter_rank, make_generator(config.seed, "adapters"))
        net.set_adapter_scale(1.0)
        net.freeze_base()
        vocab.freeze_base()
        net.eval()  # no dropout/batchnorm; keeps both passes deterministic

        self.references = references
        self.pairs = [build_pair(t, config.identifier, config.class_word, vocab) for t in templates]
        self.ids_star = torch.stack([p.tokens_star for p in self.pairs])
        self.ids_class = torch.stack([p.tokens_class for p in self.pairs])

        groups = []
        if net.adapter_params():
            groups.append({"params": net.adapter_params(), "lr": config.lr_adapter,
                           "weight_decay": config.weight_decay})
        groups.append({"params": vocab.trainable_params(), "lr": config.lr_token, "weight_decay": 0.0})
        self.optimizer = torch.optim.AdamW(groups)
        self.indicator = IndicatorState(config.bins, config.ema_alpha, temperature_for(config.temperature_mode, T))
        self.rngs = {name: make_generator(config.seed, name) for name in ("data", "augment", "noise")}
        self.step_count = 0
        self.metrics = {"sum_total": 0.0, "sum_theta": 0.0, "sum_phi": 0.0, "augmented": 0}
        self.prior_checksum = self.bundle.extra["prior_checksum"]

    # -- one step --------------------------------------------------------

    def draw_batch(self) -> torch.Tensor:
        return torch.randint(self.references.shape[0], (self.config.batch_size,), generator=self.rngs["data"])

    def step(self, batch: torch.Tensor | None = None) -> StepReport:
        """Advance one optimizer step; ``batch`` holds reference indices (drawn if omitted)."""
        cfg = self.config
        net, vocab = self.bundle.net, self.bundle.vocab
        idx = self.draw_batch() if batch is None else torch.as_tensor(batch, dtype=torch.long)
        B = idx.shape[0]

        t = int(torch.randint(self.schedule.T, (1,), generator=self.rngs["noise"]))
        b = self.binmap.bin_of(t)
        gamma = self.indicator.gamma_of(b)

        x0 = self.references[idx]
        aug_p, applied, scales, angles = 0.0, 0, [], []
        if cfg.ata:
            aug_p = augment_probability(gamma, cfg.p_max)
            outs = []
            for i in range(B):
                img, hit, params = maybe_augment(x0[i], aug_p, self.policy, self.rngs["augment"])
                outs.append(img)
                if hit:
                    applied += 1
                    scales.append(params.scale)
                    angles.append(params.angle)
            x0 = torch.stack(outs)

        eps = torch.randn(x0.shape, generator=self.rngs["noise"])
        x_t = q_sample(x0, eps, t, self.schedule)
        need_taps = cfg.rs or cfg.aa

        out = net(x_t, t, vocab.embed(self.ids_star[idx]), adapters_on=True, capture_taps=need_taps)
        eps_theta, taps_theta = out if need_taps else (out, None)
        with torch.no_grad():
            out = net(x_t, t, vocab.embed(self.ids_class[idx]), adapters_on=False, capture_taps=need_taps)
            eps_phi, taps_phi = out if need_taps else (out, None)

        loss_theta = F.mse_loss(eps_theta, eps)
        loss_phi = F.mse_loss(eps_phi, eps)
        weight = adaptive_weight(gamma) if cfg.ata else 1.0
        zero = torch.zeros(())
        l_mu, l_sigma = stat_losses(taps_theta, taps_phi, cfg.stat_reduction) if cfg.rs else (zero, zero)
        l_attn = attn_align_loss(taps_theta, taps_phi) if cfg.aa else zero
        weighted = loss_theta * weight
        terms = [v.item() for v in (weighted, l_mu, l_sigma, l_attn)]
        if not all(math.isfinite(v) for v in terms):
            self._abort(t, b, gamma, terms)
        total = total_loss(weighted, l_mu, l_sigma, l_attn, self.weights)

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        lt, lp = loss_theta.item(), loss_phi.item()
        self.indicator.update(b, lp, lt)
        self.step_count += 1
        self.metrics["sum_total"] += total.item()
        self.metrics["sum_theta"] += lt
        self.metrics["sum_phi"] += lp
        self.metrics["augmented"] += applied
        self.bundle.extra["step"] = self.step_count
        return StepReport(
            step=self.step_count, t=t, bin=b, loss_theta=lt, loss_phi=lp, gamma=gamma, weight=weight,
            l_mu=l_mu.item(), l_sigma=l_sigma.item(), l_attn=l_attn.item(), total=total.item(),
            aug_p=aug_p, aug_applied=applied,
            aug_scale=sum(scales) / len(scales) if scales else 1.0,
            aug_angle=sum(angles) / len(angles) if angles else 0.0,
            gammas=tuple(self.indicator.gamma.tolist()),
        )

    def _abort(self, t, b, gamma, terms):
        dump = {"step": self.step_count + 1, "t": t, "bin": b, "gamma": gamma,
                "terms": dict(zip(("weighted_dm", "L_mu", "L_sigma", "L_attn"), terms)),
                "indicator": self.indicator.state_dict(),
                "adapter_norms": {k: float(v.norm()) for k, v in self.bundle.net.adapter_state().items()}}
        raise NonFiniteLossError(f"non-finite loss at step {self.step_count + 1}: {terms}", dump)

    # -- resume ----------------------------------------------------------

    def run_state(self) -> RunState:
        return RunState(
            step=self.step_count,
            indicator=copy.deepcopy(self.indicator),
            rng={k: g.get_state() for k, g in self.rngs.items()},
            optimizer=copy.deepcopy(self.optimizer.state_dict()),
            metrics=dict(self.metrics),
            adapters={k: v.clone() for k, v in self.bundle.net.adapter_state().items()},
            identifier_rows=self.bundle.vocab.ident.detach().clone(),
            base_checksum=self.prior_checksum,
        )

    def load_run_state(self, state: RunState) -> None:
        if state.base_checksum != self.prior_checksum:
            raise AptError("run state was produced from a different prior")
        net, vocab = self.bundle.net, self.bundle.vocab
        missing, unexpected = net.load_state_dict(state.adapters, strict=False)
        if unexpected or any(".lora_" in k for k in missing):
            raise AptError("run state adapters do not match the configured rank")
        with torch.no_grad():
            vocab.ident.copy_(state.identifier_rows)
        self.optimizer.load_state_dict(state.optimizer)
        for k, g in self.rngs.items():
            g.set_state(state.rng[k])
        self.indicator = copy.deepcopy(state.indicator)
        self.metrics = dict(state.metrics)
        self.step_count = state.step
        self.bundle.extra["step"] = state.step


def personalize_step(run: Personalizer, batch=None) -> tuple[Personalizer, StepReport]:
    return run, run.step(batch)


def personalize(prior: ModelBundle, references: torch.Tensor, templates: list[str], cfg: ExperimentConfig,
                run_dir=None, resume=None, progress=None) -> tuple[ModelBundle, list[StepReport]]:
    """Run ``cfg.apt.steps`` APT steps.

    With ``run_dir`` set, writes ``train_log.csv``, ``indicator_log.csv``, a
    checkpoint and run state every ``checkpoint_every`` steps, and
    ``final.safetensors``. ``resume`` is a run-state file to continue from.
    """
    apt = cfg.apt
    run = Personalizer(prior, references, templates, apt, cfg.pretrain.T, cfg.pretrain.beta_start,
                       cfg.pretrain.beta_end)
    start = 0
    if resume is not None:
        run.load_run_state(RunState.load(resume))
        start = run.step_count
    reports = []
    logs = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        dump_config(cfg, run_dir / "config.yaml")
        resume_step = start if resume is not None else None
        logs = (CsvLog(run_dir / "train_log.csv", TRAIN_COLUMNS, resume_step),
                IndicatorLog(run_dir / "indicator_log.csv", resume_step))
    try:
        for _ in range(start, apt.steps):
            try:
                rep = run.step()
            except NonFiniteLossError as exc:
                if run_dir is not None:
                    (run_dir / "nonfinite_dump.json").write_text(json.dumps(exc.dump, indent=2))
                raise
            reports.append(rep)
            if logs is not None:
                logs[0].write(rep.row())
                logs[1].record(rep.step, rep.bin, run.indicator)
                if rep.step % apt.checkpoint_every == 0 or rep.step == apt.steps:
                    save_checkpoint(run_dir / "checkpoints" / f"step_{rep.step:06d}.safetensors", run.bundle)
                    run.run_state().save(run_dir / "checkpoints" / f"state_{rep.step:06d}.pt")
            if progress is not None:
                progress(rep)
    finally:
        if logs is not None:
            for lg in logs:
                lg.close()
    if base_checksum(run.bundle.net) != run.prior_checksum:
        raise AptError("prior weights changed during personalization")
    if run_dir is not None:
        save_checkpoint(run_dir / "final.safetensors", run.bundle)
    return run.bundle, reports
