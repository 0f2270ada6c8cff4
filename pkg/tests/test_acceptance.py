"""Acceptance suite: one test per criterion.

Criteria 2-5, 8 and 9 run on the trained bundle cached under
``artifacts/bundle`` (built on first use).  Measured margins are frozen into
``artifacts/baseline.json`` the first time they are seen and later runs must
reproduce them.
"""

import json

import numpy as np
import pytest

from conftest import ARTIFACTS, TRAINED_CFG
from dualid.autodiff import Tensor, finite_diff_check
from dualid.autodiff import tensor as T
from dualid.branches.merge import (BASE_ONLY, TRAINING_MERGE, RescaleConfig, merge_normalized, merge_uniform,
                                   rescale_name)
from dualid.cli import main as cli_main
from dualid.diagnostics import (BENCH_MODES, DEFAULT_ALPHAS, DEFAULT_BETAS, SENTINEL, HeatmapGrid, ablation_suite,
                                heldout_eval_set, identity_trend_inversions, profile_norms, read_grid_csv)
from dualid.diffusion.model import BaseDiffusion, diffusion_loss, to_pixels
from dualid.diffusion.sampling import SamplerConfig, sample_loop
from dualid.diffusion.schedule import make_schedule, q_sample
from dualid.diffusion.unet import DenoiserContext
from dualid.inference import BUNDLE_FILES
from dualid.pipeline import portrait_split
from dualid.text.vocab import tokenize
from dualid.training import IdentityBranch

EVAL = SamplerConfig(steps=TRAINED_CFG.eval_steps, sampler=TRAINED_CFG.eval_sampler)
BASELINE = ARTIFACTS / "baseline.json"
BASELINE_TOL = 0.01


def frozen(key: str, value: float) -> float:
    """The first measured value of ``key`` (recorded now if this is the first run)."""
    data = json.loads(BASELINE.read_text()) if BASELINE.exists() else {}
    if key not in data:
        data[key] = value
        BASELINE.parent.mkdir(parents=True, exist_ok=True)
        BASELINE.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return data[key]


@pytest.fixture(scope="module")
def reports(trained_bundle):
    es = heldout_eval_set(TRAINED_CFG.eval_identities)
    assert es.n_pairs >= 32 * 32
    return ablation_suite(trained_bundle, es, EVAL, include_reference=True)


def _fro(x):
    return float(np.sqrt(np.sum(x * x)))


def test_criterion_1_rescaling_laws():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        shape = (1, int(rng.integers(1, 20)), int(rng.integers(1, 16)))
        H = rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)
        Hp = rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)
        alpha = float(rng.uniform(0.01, 5))
        Z = merge_normalized(H, Hp, alpha)
        d = Z - H
        assert abs(_fro(d) / (alpha * _fro(H)) - 1) < 1e-6
        assert abs(np.sum(d * Hp) / (_fro(d) * _fro(Hp)) - 1) < 1e-6
        Zu = merge_uniform(H, Hp, alpha * _fro(H) / _fro(Hp))
        assert _fro(Zu - Z) <= 1e-6 * _fro(Z)

        e = rng.standard_normal((3, 64)) * 10.0 ** rng.uniform(-3, 3)
        ebar = float(10.0 ** rng.uniform(-2, 2))
        beta = float(rng.uniform(0.01, 5))
        out = rescale_name(e, ebar, beta)
        n = np.linalg.norm(out, axis=-1)
        assert np.all(np.abs(n / (beta * ebar) - 1) < 1e-6)
        assert np.all(np.abs(np.sum(out * e, axis=-1) / (n * np.linalg.norm(e, axis=-1)) - 1) < 1e-6)


def test_criterion_2_base_recovery(trained_bundle):
    base = trained_bundle.base
    feats = trained_bundle.encoder.transform(portrait_split(TRAINED_CFG).images[:1])
    rng = np.random.default_rng(7)
    seeds = [int(s) for s in rng.integers(0, 2**31, 10)]
    prompts = ["a sketch of <id> with a hat on a green background"] * 10
    generic = [p.replace("<id>", "a person") for p in prompts]
    emb, _ = base.encode_prompts(generic)
    cfg = EVAL.replace(rescale=BASE_ONLY)
    reference = to_pixels(sample_loop(base.denoiser, base.schedule, DenoiserContext(Tensor(emb)), seeds, cfg))
    f = np.repeat(feats, 10, axis=0)
    both_off = trained_bundle.generate(prompts, f, seeds, EVAL.replace(
        rescale=RescaleConfig(adapter_enabled=False, text_enabled=False)))
    alpha_zero = trained_bundle.generate(prompts, f, seeds, EVAL.replace(
        rescale=RescaleConfig(alpha=0.0, text_enabled=False)))
    assert np.array_equal(both_off, reference)
    assert np.array_equal(alpha_zero, reference)


def test_criterion_3_dual_branch_identity(reports):
    full, a, b = (reports[k].identity_score for k in ("Full", "Var A", "Var B"))
    print(f"identity Full {full:.4f} Var A {a:.4f} Var B {b:.4f}")
    assert full > a and full > b
    margin = full - max(a, b)
    assert abs(margin - frozen("identity_margin_full_vs_single", margin)) <= BASELINE_TOL


def test_criterion_4_rescaling_restores_controllability(reports):
    c = {k: r.controllability_score for k, r in reports.items()}
    print("controllability " + " ".join(f"{k}={v:.4f}" for k, v in c.items()))
    c_base = frozen("controllability_base", c["Base"])
    assert abs(c["Base"] - c_base) <= BASELINE_TOL
    assert c["Var C"] < c["Full"] and c["Var D"] < c["Full"]
    assert c["No rescaling"] < 0.5 * c["Base"]
    assert c["Full"] >= 0.8 * c["Base"]


def test_criterion_5_norm_inflation(trained_bundle):
    images = portrait_split(TRAINED_CFG).images[:64]
    prof = profile_norms(trained_bundle, images, n_timesteps=10)
    print("site ratios", np.round(prof.site_mean, 3), "text ratio", round(prof.text_mean, 3))
    assert prof.site_mean.max() > 1.5
    assert prof.text_mean > 1.5


def _float64(module):
    return module.astype(np.float64).unfreeze()


def test_criterion_6_gradient_integrity(trained_bundle_dir):
    rng = np.random.default_rng(6)
    base = BaseDiffusion.load(trained_bundle_dir / BUNDLE_FILES["base"])
    text = IdentityBranch.load(trained_bundle_dir / BUNDLE_FILES["text"])
    adapter = IdentityBranch.load(trained_bundle_dir / BUNDLE_FILES["adapter"])
    for m in (base.net_, text.net_, adapter.net_):
        _float64(m)
    # the trained output conv can be close to zero; perturb it so every upstream weight gets gradient
    base.denoiser.conv_out.weight.data += 0.05 * rng.standard_normal(base.denoiser.conv_out.weight.shape)
    feats = rng.standard_normal((2, 32))
    ids = np.stack([tokenize("a sketch of <id> with a hat").ids, tokenize("a photo of name003 on a red background").ids])
    x0 = rng.uniform(-1, 1, (2, 32, 32, 3))
    sched = make_schedule()
    failures = []

    for merge in (TRAINING_MERGE, RescaleConfig(alpha=1.2)):
        def loss(merge=merge):
            ctx = DenoiserContext(base.text_encoder(ids), adapter.net_(feats), adapter.net_.projections, merge)
            return diffusion_loss(x0, base.denoiser, ctx, sched, np.random.default_rng(1), t=np.array([30, 160]))

        proj = [lin.weight for pair in adapter.net_.projections for lin in pair]
        rep = finite_diff_check(loss, base.net_.parameters() + proj, max_entries=3, rng=np.random.default_rng(2))
        failures += [str(f) for f in rep.failures()]

    for branch in (text, adapter):
        target = rng.standard_normal(branch.net_(feats).shape)
        rep = finite_diff_check(lambda b=branch: T.mse(b.net_(feats), target), branch.net_.qformer.parameters(),
                                max_entries=4, rng=np.random.default_rng(3))
        failures += [str(f) for f in rep.failures()]
    assert not failures, failures


def test_criterion_7_diffusion_process():
    s = make_schedule()
    ab = np.cumprod(1.0 - s.betas)
    assert np.max(np.abs(s.alpha_bars - ab)) < 1e-10
    assert np.all(np.abs(s.alpha_bars[1:] - s.alpha_bars[:-1] * (1 - s.betas[1:])) < 1e-10)

    rng = np.random.default_rng(0)
    x0 = np.full((20000, 1, 1, 1), 0.3)
    for t in (10, 100, 199):
        xt = q_sample(s, x0, np.full(len(x0), t), rng.standard_normal(x0.shape))
        assert abs(np.var(xt) / (1 - s.alpha_bars[t]) - 1) < 0.05
        assert abs(np.mean(xt) - np.sqrt(s.alpha_bars[t]) * 0.3) < 0.02

    x0 = rng.uniform(-1, 1, (16, 32, 32, 3))

    def oracle(x_t, t, ctx):
        a = s.alpha_bars[t].reshape(-1, 1, 1, 1)
        return Tensor((x_t - np.sqrt(a) * x0) / np.sqrt(1 - a))

    assert float(diffusion_loss(x0, oracle, None, s, rng).data) == pytest.approx(0.0, abs=1e-12)


def test_criterion_8_grid_search_artifact(trained_bundle_dir, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli_main(["grid-search", "--bundle", str(trained_bundle_dir), "--out-dir", str(out),
                         "--steps", str(TRAINED_CFG.eval_steps), "--sampler", TRAINED_CFG.eval_sampler])
        assert code == 0
        runs.append(out / "grid.csv")
    assert runs[0].read_bytes() == runs[1].read_bytes()
    rows = read_grid_csv(runs[0])
    cells = [r for r in rows if r["alpha"] != SENTINEL]
    assert len(cells) == 64 and len(rows) == 65
    assert sorted({r["alpha"] for r in cells}) == list(DEFAULT_ALPHAS)
    assert sorted({r["beta"] for r in cells}) == list(DEFAULT_BETAS)
    grid = np.zeros((8, 8, 2))
    for r in cells:
        i, j = DEFAULT_ALPHAS.index(r["alpha"]), DEFAULT_BETAS.index(r["beta"])
        grid[i, j] = r["identity_score"], r["controllability_score"]
    inversions = identity_trend_inversions(HeatmapGrid(DEFAULT_ALPHAS, DEFAULT_BETAS, grid))
    print("identity vs alpha around beta=1.8:", np.round(grid[:, 3:6, 0].mean(axis=1), 4), "inversions", inversions)
    assert inversions <= 1


def test_criterion_9_timing_report(trained_bundle_dir, tmp_path, capsys):
    code = cli_main(["bench", "--bundle", str(trained_bundle_dir), "--out-dir", str(tmp_path)])
    out = capsys.readouterr().out
    print(out)
    report = json.loads((tmp_path / "manifest.json").read_text())
    assert set(report["seconds"]) == set(BENCH_MODES)
    assert report["overhead_pct"]["dual"] <= 100.0
    assert code == 0
