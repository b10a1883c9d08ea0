"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line in the terminal summary.

Criteria 6 and 7 train on the full-size 32 px prior (pretrained once and cached
by pytest's cache directory); the rest run in seconds.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
import yaml

from aptdiff import corpus as corpus_mod
from aptdiff.augment import affine_zoom_rotate, empirical_rate, maybe_augment, AugmentPolicy
from aptdiff.cli import main
from aptdiff.config import AptConfig, ExperimentConfig
from aptdiff.csvlog import read_rows
from aptdiff.diagnostics import delta_noise, delta_noise_series, gamma_report, make_probe_set, sample
from aptdiff.indicator import (
    BinMap,
    IndicatorState,
    adaptive_weight,
    augment_probability,
    bin_of,
    compute_gamma,
)
from aptdiff.reg import attn_align_loss, stat_losses
from aptdiff.tinynet import NetConfig, TapBundle
from aptdiff.trainer import Personalizer, init_prior, personalize

from conftest import ACCEPT_PRETRAIN, tiny_config
from test_reg import central_difference, relative_error

D = torch.float64

# Criterion 7 threshold: a desk-scale choice. Full APT must cut the final
# prior-vs-tuned noise divergence to at most 70% of the unregularized run's.
DELTA_NOISE_RATIO = 0.7
TREND_STEPS = 2000
TREND_SEEDS = (0, 1, 2, 3, 4)


# ---------------------------------------------------------------------------
# 1-3: exact unit semantics


def test_criterion_1_indicator_units(criterion):
    with criterion(1, "indicator unit suite") as info:
        t0 = time.perf_counter()
        assert compute_gamma(0.25, 0.25, 1000.0) == 0.0
        assert abs(compute_gamma(0.001, 0.0, 1000.0) - 0.632121) <= 1e-6
        assert compute_gamma(0.0, 0.0005, 1000.0) == 0.0
        assert augment_probability(0.9, 0.8) == 0.8
        assert adaptive_weight(0.25) * 2.0 == 1.5
        m = BinMap(1000, 10)
        assert all(bin_of(t, m) == math.floor(t / 100) for t in range(1000))
        assert (bin_of(0, m), bin_of(99, m), bin_of(100, m), bin_of(999, m)) == (0, 0, 1, 9)
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0
        info["detail"] = f"{elapsed * 1e3:.1f} ms"


def test_criterion_2_ema_oracle(criterion):
    with criterion(2, "EMA closed-form oracle") as info:
        t0 = time.perf_counter()
        alpha, n = 0.1, 500
        rng = np.random.default_rng(2024)
        phi, theta = rng.uniform(0, 2, n), rng.uniform(0, 2, n)
        state = IndicatorState(1, alpha=alpha)
        state.update(0, float(phi[0]), float(theta[0]))
        assert (state.ema_phi[0], state.ema_theta[0]) == (phi[0], theta[0])
        for k in range(1, n):
            state.update(0, float(phi[k]), float(theta[k]))
        # first sample seeds the track, then (1-a)^m * x0 + a * sum_k (1-a)^(m-k) x_k over m = n-1 updates
        m = n - 1
        decay = (1 - alpha) ** (m - np.arange(1, n))

        def oracle(x):
            return (1 - alpha) ** m * x[0] + alpha * float(np.sum(decay * x[1:]))

        err = max(abs(state.ema_phi[0] - oracle(phi)), abs(state.ema_theta[0] - oracle(theta)))
        assert err <= 1e-10
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0
        info["detail"] = f"max err {err:.1e}, {elapsed * 1e3:.1f} ms"


def test_criterion_3_regularizers(criterion):
    with criterion(3, "regularizer identities and gradients") as info:
        t0 = time.perf_counter()
        g = torch.Generator().manual_seed(3)
        h = torch.randn(2, 3, 4, 4, generator=g, dtype=D)
        a = torch.randn(2, 2, 16, 5, generator=g, dtype=D).softmax(-1)
        same = TapBundle({(0, 0): h}, {(0, 0): a})
        l_mu, l_sigma = stat_losses(same, TapBundle({(0, 0): h.clone()}, {(0, 0): a.clone()}))
        assert (float(l_mu), float(l_sigma), float(attn_align_loss(same, same))) == (0.0, 0.0, 0.0)

        h1 = torch.randn(1, 1, 4, 4, generator=g, dtype=D)
        l_mu, l_sigma = stat_losses(TapBundle({(0, 0): h1 + 0.5}), TapBundle({(0, 0): h1}))
        assert abs(float(l_mu) - 0.25) < 1e-8 and abs(float(l_sigma)) < 1e-8
        z = (h1 - h1.mean()) / h1.std(unbiased=False)
        l_mu, l_sigma = stat_losses(TapBundle({(0, 0): 2 * z}), TapBundle({(0, 0): z}))
        assert abs(float(l_mu)) < 1e-8 and abs(float(l_sigma) - 1.0) < 1e-8
        a_t = torch.tensor([[[1.0, 0.0]], [[1.0, 0.0]]], dtype=D)
        a_p = torch.full((2, 1, 2), 0.5, dtype=D)
        assert abs(float(attn_align_loss(TapBundle(attentions={(0, 0): a_t}),
                                         TapBundle(attentions={(0, 0): a_p}))) - 1.0) < 1e-8

        worst, checks = 0.0, 0
        for seed in range(8):
            g = torch.Generator().manual_seed(100 + seed)
            s, c, heads = 2 + seed % 3, 1 + seed % 2, 1 + seed % 2
            h_p = torch.randn(1, c, s, s, generator=g, dtype=D)
            a_phi = torch.randn(1, heads, s * s, 3, generator=g, dtype=D).softmax(-1)
            phi = TapBundle({(0, 0): h_p}, {(0, 0): a_phi})
            cases = (
                (lambda x: stat_losses(TapBundle({(0, 0): x}), phi)[0], torch.randn(1, c, s, s, generator=g, dtype=D)),
                (lambda x: stat_losses(TapBundle({(0, 0): x}), phi)[1], torch.randn(1, c, s, s, generator=g, dtype=D)),
                (lambda x: attn_align_loss(TapBundle(attentions={(0, 0): x.softmax(-1)}), phi),
                 torch.randn(1, heads, s * s, 3, generator=g, dtype=D)),
            )
            for fn, x in cases:
                x = x.requires_grad_(True)
                (analytic,) = torch.autograd.grad(fn(x), x)
                with torch.no_grad():
                    numeric = central_difference(fn, x.detach().clone(), h=1e-3)
                worst = max(worst, relative_error(analytic, numeric))
                checks += 1
        assert checks >= 20 and worst < 1e-4
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0
        info["detail"] = f"{checks} gradient checks, worst rel err {worst:.1e}, {elapsed:.2f} s"


# ---------------------------------------------------------------------------
# 4: toggle identity


def test_criterion_4_toggle_identity(criterion):
    with criterion(4, "adapter toggle identity") as info:
        t0 = time.perf_counter()
        net_cfg = NetConfig()
        prior = init_prior(net_cfg, corpus_mod.vocabulary_words(), seed=4)
        refs, templates = corpus_mod.reference_set(1, net_cfg.image_size, "square")
        apt = AptConfig(steps=0, seed=4, lr_adapter=1e-2)
        probes = make_probe_set(corpus_mod.make_corpus(64, net_cfg.image_size, seed=0), 16, seed=4,
                                class_word="square")
        caption = "a photo of square in the field"

        # fresh (zero-initialized) adapters
        run = Personalizer(prior, refs, templates, apt)
        x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        tokens_c = run.bundle.vocab.embed(run.ids_class[[0, 0]])
        tokens_s = run.bundle.vocab.embed(run.ids_star[[0, 0]])
        with torch.no_grad():
            e_t, taps_t = run.bundle.net(x, 321, tokens_s, adapters_on=True, capture_taps=True)
            e_p, taps_p = run.bundle.net(x, 321, tokens_c, adapters_on=False, capture_taps=True)
        assert torch.equal(e_t, e_p)
        l_mu, l_sigma = stat_losses(taps_t, taps_p)
        assert (float(l_mu), float(l_sigma), float(attn_align_loss(taps_t, taps_p))) == (0.0, 0.0, 0.0)
        assert delta_noise(run.bundle, probes, "train") == 0.0
        rep = run.step()
        assert rep.loss_theta == rep.loss_phi and (rep.l_mu, rep.l_sigma, rep.l_attn) == (0.0, 0.0, 0.0)

        # trained adapters at scale 0 (class caption on both sides: the identifier row has moved)
        for _ in range(5):
            run.step()
        net = run.bundle.net
        with torch.no_grad():
            assert not torch.equal(net(x, 321, tokens_c, adapters_on=True), net(x, 321, tokens_c))
            net.set_adapter_scale(0.0)
            e_t, taps_t = net(x, 321, tokens_c, adapters_on=True, capture_taps=True)
            e_p, taps_p = net(x, 321, tokens_c, adapters_on=False, capture_taps=True)
        assert torch.equal(e_t, e_p)
        l_mu, l_sigma = stat_losses(taps_t, taps_p)
        assert (float(l_mu), float(l_sigma), float(attn_align_loss(taps_t, taps_p))) == (0.0, 0.0, 0.0)
        assert delta_noise(run.bundle, probes, "shared") == 0.0
        scaled_grid = sample(run.bundle, caption, n=2, seed=7, steps=100)

        # end-to-end sampling: prior vs an untrained personalization
        untouched, _ = personalize(prior, refs, templates, ExperimentConfig(apt=apt))
        prior_grid = sample(prior, caption, n=2, seed=7, steps=100)
        assert torch.equal(sample(untouched, caption, n=2, seed=7, steps=100), prior_grid)
        assert torch.equal(scaled_grid, prior_grid)
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0
        info["detail"] = f"{elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 5: augmentation statistics


def test_criterion_5_augmentation_statistics(criterion):
    with criterion(5, "augmentation statistics") as info:
        t0 = time.perf_counter()
        rate = empirical_rate(0.5, 10_000, torch.Generator().manual_seed(5))
        assert abs(rate - 0.5) <= 0.02
        out = affine_zoom_rotate(torch.ones(3, 96, 96, dtype=D), 3.0, 0.0, fill=-1.0)
        frac = float((out > -1.0 + 1e-9).all(dim=0).double().mean())
        assert abs(frac - 1 / 9) <= 0.02 * (1 / 9)
        # the sampled path produces the same geometry when forced to scale 3
        forced = AugmentPolicy(scale_range=(3.0, 3.0), rotation_range=(0.0, 0.0), fill=-1.0)
        img, applied, params = maybe_augment(torch.ones(3, 96, 96, dtype=D), 1.0, forced,
                                             torch.Generator().manual_seed(0))
        assert applied and params.scale == 3.0 and torch.equal(img, out)
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0
        info["detail"] = f"rate {rate:.4f}, area {frac * 9:.4f}/9, {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 6-7: training-dynamics trends on the 32 px prior


@pytest.fixture(scope="module")
def trend_setup(accept_prior, tmp_path_factory):
    cfg = ExperimentConfig(pretrain=ACCEPT_PRETRAIN, apt=AptConfig(steps=TREND_STEPS, checkpoint_every=250))
    refs, templates = corpus_mod.reference_set(1, cfg.net.image_size, cfg.apt.class_word)
    return cfg, refs, templates, tmp_path_factory.mktemp("trends")


@pytest.fixture(scope="module")
def base_runs(accept_prior, trend_setup):
    cfg, refs, templates, root = trend_setup
    runs, t0 = {}, time.perf_counter()
    for seed in TREND_SEEDS:
        scfg = replace(cfg, apt=replace(cfg.apt, seed=seed).with_ablation("base"))
        personalize(accept_prior, refs, templates, scfg, run_dir=root / f"base-s{seed}")
        runs[seed] = root / f"base-s{seed}"
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_6_gamma_grows_fastest_at_low_noise(criterion, base_runs):
    with criterion(6, "low-noise bins overfit first (base ablation, 5 seeds)") as info:
        runs, elapsed = base_runs
        outcomes = []
        for seed, run_dir in runs.items():
            final = gamma_report(run_dir / "indicator_log.csv", bins=10).final
            low, high = float(final[:3].mean()), float(final[-3:].mean())
            outcomes.append((seed, low, high, low > high))
        wins = sum(o[3] for o in outcomes)
        info["detail"] = f"{wins}/5 seeds; " + ", ".join(f"s{s}: {lo:.3f}>{hi:.3f}" for s, lo, hi, _ in outcomes) \
            + f"; {elapsed / 60:.1f} min"
        print(json.dumps({"criterion": 6, "seeds": outcomes}))
        assert wins >= 4
        assert elapsed < 20 * 60


@pytest.mark.slow
def test_criterion_7_full_apt_limits_noise_drift(criterion, accept_prior, trend_setup, base_runs):
    with criterion(7, "full APT keeps predicted noise near the prior") as info:
        cfg, refs, templates, root = trend_setup
        t0 = time.perf_counter()
        full_cfg = replace(cfg, apt=replace(cfg.apt, seed=0).with_ablation("aa"))
        personalize(accept_prior, refs, templates, full_cfg, run_dir=root / "full-s0")
        corpus = corpus_mod.make_corpus(ACCEPT_PRETRAIN.corpus_size, cfg.net.image_size, ACCEPT_PRETRAIN.corpus_seed)
        probes = make_probe_set(corpus, 64, cfg.apt.bins, cfg.pretrain.T, seed=0, class_word=cfg.apt.class_word)
        base = delta_noise_series(base_runs[0][0], probes)
        full = delta_noise_series(root / "full-s0", probes)
        assert [s for s, _ in base] == [s for s, _ in full] and len(base) == TREND_STEPS // 250
        elapsed = time.perf_counter() - t0 + base_runs[1] / len(TREND_SEEDS)
        b_first, b_last, f_last = base[0][1], base[-1][1], full[-1][1]
        info["detail"] = (f"base {b_first:.5f} -> {b_last:.5f}, full final {f_last:.6f} "
                          f"(ratio {f_last / b_last:.4f}); {elapsed / 60:.1f} min")
        print(json.dumps({"criterion": 7, "base": base, "full": full}))
        assert f_last <= DELTA_NOISE_RATIO * b_last
        assert b_last > b_first
        assert elapsed < 40 * 60


# ---------------------------------------------------------------------------
# 8: ablation lattice and reproducibility through the CLI


def _ablate(tmp_path, capsys, config_file, prior_path, out):
    code = main(["ablate", "--config", str(config_file), "--prior", str(prior_path), "--run-dir", str(out)])
    stdout, stderr = capsys.readouterr()
    assert code == 0, stderr
    return json.loads(stdout)


def test_criterion_8_ablation_lattice_and_reproducibility(criterion, tmp_path, capsys, tiny_prior_path):
    with criterion(8, "ablation lattice, bit reproducibility, resume") as info:
        cfg = tiny_config(steps=30, checkpoint_every=10)
        config_file = tmp_path / "cfg.yaml"
        config_file.write_text(yaml.safe_dump(cfg.to_dict()))

        first = _ablate(tmp_path, capsys, config_file, tiny_prior_path, tmp_path / "a")
        second = _ablate(tmp_path, capsys, config_file, tiny_prior_path, tmp_path / "b")
        table = read_rows(tmp_path / "a" / "ablation.csv")
        assert [r["variant"] for r in table] == ["base", "ata", "rs", "aa"]
        assert [(r["ata"], r["rs"], r["aa"]) for r in table] == [("0", "0", "0"), ("1", "0", "0"), ("1", "1", "0"),
                                                                 ("1", "1", "1")]
        assert first["rows"] == second["rows"]
        compared = ["ablation.csv"]
        for variant in ("base", "ata", "rs", "aa"):
            for name in ("train_log.csv", "indicator_log.csv", "gamma/gamma_summary.csv", "gamma/gamma_curves.csv",
                         "gamma/gamma_curves.png"):
                compared.append(f"{variant}/{name}")
        for name in compared:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

        # resume from the step-10 run state and compare with the unbroken logs
        for variant in ("base", "aa"):
            split = tmp_path / f"split-{variant}"
            common = ["personalize", "--config", str(config_file), "--prior", str(tiny_prior_path),
                      "--ablation", variant, "--run-dir", str(split)]
            assert main(common + ["--steps", "10"]) == 0
            assert main(common + ["--resume", str(split / "checkpoints" / "state_000010.pt")]) == 0
            capsys.readouterr()
            for name in ("train_log.csv", "indicator_log.csv"):
                assert (split / name).read_bytes() == (tmp_path / "a" / variant / name).read_bytes(), (variant, name)
        info["detail"] = f"4 rows, {len(compared)} files byte-identical on rerun, resume matches"
