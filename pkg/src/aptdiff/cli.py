"""Command-line entry point: ``aptdiff <verb> [flags]``.

Every verb reads the YAML config given by ``--config`` (or ``$APTDIFF_CONFIG``,
else built-in defaults), applies flag overrides, and writes its outputs under
``<root>/<verb>-<config digest>-s<seed>/`` unless ``--run-dir`` names a
directory explicitly. On success a one-line JSON summary goes to stdout and the
exit code is 0. On failure the exit code is 1 (2 for bad flags) and stderr
carries ``{"error": <code>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from aptdiff import corpus as corpus_mod
from aptdiff.ckpt import load_checkpoint, save_checkpoint
from aptdiff.config import ABLATIONS, ExperimentConfig, dump_config, load_config, override
from aptdiff.errors import AptError, RangeError

log = logging.getLogger("aptdiff")


def run_dir_for(root, verb: str, cfg: ExperimentConfig, seed: int) -> Path:
    return Path(root) / f"{verb}-{cfg.digest()}-s{seed}"


def _resolve_dir(args, verb: str, cfg: ExperimentConfig, seed: int) -> Path:
    d = Path(args.run_dir) if args.run_dir else run_dir_for(args.root, verb, cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _references(args, cfg: ExperimentConfig, run_dir: Path):
    """Load references from ``--references`` or write the built-in subject into ``run_dir``."""
    manifest = args.references
    if manifest is None:
        manifest = corpus_mod.write_reference_set(run_dir / "references", args.num_references,
                                                  cfg.net.image_size, cfg.apt.class_word)
    images, records = corpus_mod.load_reference_set(manifest)
    words = {r.class_word for r in records}
    if len(words) != 1:
        raise RangeError(f"references must share one class word, got {sorted(words)}")
    cfg = override(cfg, "apt", class_word=words.pop())
    return images, [r.template for r in records], cfg


def _progress(every: int):
    def report(rep):
        if rep.step % every == 0:
            log.info("step %d  L_theta=%.5f  L_phi=%.5f  gamma=%.4f  total=%.5f",
                     rep.step, rep.loss_theta, rep.loss_phi, rep.gamma, rep.total)
    return report


# -- verbs ---------------------------------------------------------------


def cmd_pretrain(args, cfg: ExperimentConfig) -> dict:
    from aptdiff.trainer import pretrain, validation_loss

    cfg = override(cfg, "pretrain", steps=args.steps, seed=args.seed)
    p = cfg.pretrain
    run_dir = _resolve_dir(args, "pretrain", cfg, p.seed)
    dump_config(cfg, run_dir / "config.yaml")
    corpus = corpus_mod.make_corpus(p.corpus_size, cfg.net.image_size, p.corpus_seed)

    def progress(step, loss):
        if step % 100 == 0:
            log.info("pretrain step %d  loss=%.5f", step, loss)

    bundle = pretrain(corpus, cfg.net, p.steps, p.seed, p, progress=progress)
    path = save_checkpoint(run_dir / "prior.safetensors", bundle)
    return {"checkpoint": str(path), "validation_loss": validation_loss(bundle, corpus, T=p.T)}


def cmd_personalize(args, cfg: ExperimentConfig) -> dict:
    from aptdiff.trainer import personalize

    cfg = override(cfg, "apt", steps=args.steps, seed=args.seed)
    if args.ablation:
        cfg = override(cfg, "apt", **dict(zip(("ata", "rs", "aa"), ABLATIONS[args.ablation])))
    run_dir = _resolve_dir(args, "personalize", cfg, cfg.apt.seed)
    prior = load_checkpoint(args.prior, expect_config=cfg.net)
    images, templates, cfg = _references(args, cfg, run_dir)
    bundle, reports = personalize(prior, images, templates, cfg, run_dir=run_dir, resume=args.resume,
                                  progress=_progress(args.log_every))
    return {"run_dir": str(run_dir), "checkpoint": str(run_dir / "final.safetensors"),
            "steps": bundle.extra.get("step", 0), "ablation": cfg.apt.ablation,
            "final_gamma": list(reports[-1].gammas) if reports else None}


def cmd_sample(args, cfg: ExperimentConfig) -> dict:
    from aptdiff.diagnostics import sample

    out = Path(args.out)
    imgs = sample(args.checkpoint, args.caption, n=args.n, guidance_scale=args.guidance, seed=args.seed,
                  steps=args.sample_steps, out_path=out)
    return {"grid": str(out), "n": int(imgs.shape[0])}


def cmd_delta_noise(args, cfg: ExperimentConfig) -> dict:
    from aptdiff.diagnostics import checkpoint_series, delta_noise, make_probe_set

    p = cfg.pretrain
    corpus = corpus_mod.make_corpus(p.corpus_size, cfg.net.image_size, p.corpus_seed)
    probes = make_probe_set(corpus, args.probes, cfg.apt.bins, p.T, seed=args.probe_seed,
                            class_word=cfg.apt.class_word)
    if args.checkpoint:
        targets = [(None, Path(c)) for c in args.checkpoint]
    else:
        targets = checkpoint_series(args.series)
        if not targets:
            raise RangeError(f"no checkpoints under {args.series}/checkpoints")
    rows = [{"step": step, "checkpoint": str(path), "delta_noise": delta_noise(path, probes, args.convention)}
            for step, path in targets]
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w") as f:
            f.write("step,checkpoint,delta_noise\n")
            for r in rows:
                f.write(f"{'' if r['step'] is None else r['step']},{r['checkpoint']},{r['delta_noise']!r}\n")
    return {"convention": args.convention, "probe_seed": args.probe_seed, "results": rows}


def cmd_gamma_report(args, cfg: ExperimentConfig) -> dict:
    from aptdiff.diagnostics import gamma_report

    report = gamma_report(args.log, bins=args.bins or cfg.apt.bins, out_dir=args.out)
    return {"out": str(args.out), "final_gamma": report.final.tolist(),
            "first_step_above_0.5": report.first_above_half}


def cmd_ablate(args, cfg: ExperimentConfig) -> dict:
    from aptdiff.diagnostics import run_ablation_suite

    cfg = override(cfg, "apt", steps=args.steps, seed=args.seed)
    run_dir = _resolve_dir(args, "ablate", cfg, cfg.apt.seed)
    prior = load_checkpoint(args.prior, expect_config=cfg.net)
    images, templates, cfg = _references(args, cfg, run_dir)
    dump_config(cfg, run_dir / "config.yaml")
    rows = run_ablation_suite(cfg, prior, images, templates, run_dir, variants=args.variants,
                              progress=_progress(args.log_every))
    return {"table": str(run_dir / "ablation.csv"), "rows": rows}


def cmd_make_references(args, cfg: ExperimentConfig) -> dict:
    manifest = corpus_mod.write_reference_set(args.out, args.n, cfg.net.image_size, cfg.apt.class_word)
    return {"manifest": str(manifest)}


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aptdiff", description="Adaptive personalized training for a toy diffusion model.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, fn, help_text, run_dir=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config (default: $APTDIFF_CONFIG, else built-in defaults)")
        if run_dir:
            p.add_argument("--root", default="runs", help="parent of the hashed run directory (default: runs)")
            p.add_argument("--run-dir", help="exact output directory, overriding the hashed name")
        p.set_defaults(func=fn)
        return p

    p = add("pretrain", cmd_pretrain, "train the prior on the procedural shapes corpus", run_dir=True)
    p.add_argument("--steps", type=int, help="override pretrain.steps")
    p.add_argument("--seed", type=int, help="override pretrain.seed")

    for name, fn, text in (("personalize", cmd_personalize, "personalize the prior on reference images"),
                           ("ablate", cmd_ablate, "train the four cumulative ablation variants and tabulate them")):
        p = add(name, fn, text, run_dir=True)
        p.add_argument("--prior", required=True, help="prior checkpoint (.safetensors)")
        p.add_argument("--references", help="caption manifest; default writes the built-in subject")
        p.add_argument("--num-references", type=int, default=1, help="images for the built-in subject (1-10)")
        p.add_argument("--steps", type=int, help="override apt.steps")
        p.add_argument("--seed", type=int, help="override apt.seed")
        p.add_argument("--log-every", type=int, default=100, help="progress interval in steps")
        if name == "personalize":
            p.add_argument("--ablation", choices=tuple(ABLATIONS), help="set the ata/rs/aa flags to a named variant")
            p.add_argument("--resume", help="run-state file (checkpoints/state_XXXXXX.pt) to continue from")
        else:
            p.add_argument("--variants", nargs="+", choices=tuple(ABLATIONS), default=list(ABLATIONS))

    p = add("sample", cmd_sample, "draw a grid of samples with classifier-free guidance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True, help='e.g. "a photo of V* in the field"')
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-steps", type=int, help="respaced sampling steps (default: full schedule)")
    p.add_argument("--out", required=True, help="output PNG path")

    p = add("delta-noise", cmd_delta_noise, "prior-vs-tuned noise divergence on a fixed probe set")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", nargs="+", help="one or more checkpoints")
    src.add_argument("--series", help="run directory; evaluates every checkpoints/step_*.safetensors")
    p.add_argument("--convention", choices=("train", "shared"), default="train",
                   help="train: tuned model sees the identifier caption; shared: both see the class caption")
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--out", help="optional CSV output")

    p = add("gamma-report", cmd_gamma_report, "per-bin indicator curves from an indicator log")
    p.add_argument("--log", required=True, help="indicator_log.csv")
    p.add_argument("--bins", type=int, help="default: apt.bins from the config")
    p.add_argument("--out", required=True, help="output directory")

    p = add("make-references", cmd_make_references, "write the built-in subject images and manifest")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        result = args.func(args, cfg)
    except AptError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "io_error", "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
