import numpy as np
import pytest

from dualid.base import ValidationError
from dualid.branches.merge import RescaleConfig
from dualid.data.synth import all_compositions
from dualid.diagnostics import (BENCH_MODES, DEFAULT_ALPHAS, DEFAULT_BETAS, SENTINEL, EvalSet, HeatmapGrid,
                                ablation_configs, ablation_suite, bench, evaluate, grammar_prompts,
                                heldout_eval_set, identity_trend_inversions, no_rescaling_config, profile_norms,
                                read_grid_csv, grid_search, write_reports_csv)
from dualid.diffusion.sampling import SamplerConfig

CFG = SamplerConfig(steps=2)


@pytest.fixture(scope="module")
def eval_set():
    return heldout_eval_set(2, n_prompts=3)


def test_default_axes():
    assert DEFAULT_ALPHAS == (0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8)
    assert DEFAULT_BETAS == (1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4)


def test_grammar_prompts_cover_all_compositions():
    prompts, comps = grammar_prompts()
    assert len(prompts) == len(all_compositions()) == 32
    assert all("<id>" in p for p in prompts)


def test_eval_set_seeds_are_unique_and_fixed(eval_set):
    pairs = list(eval_set.pairs())
    assert len(pairs) == eval_set.n_pairs == 6
    assert len({s for _, _, s in pairs}) == 6
    assert pairs == list(heldout_eval_set(2, n_prompts=3).pairs())
    assert eval_set.references.shape == (2, 32, 32, 3)


def test_empty_eval_set_rejected():
    with pytest.raises(ValidationError):
        EvalSet([], np.zeros((0, 32, 32, 3)), ["a photo of <id>"], [])


def test_heldout_identities_are_fresh():
    from dualid.pipeline import PipelineConfig, compositional_split
    es = heldout_eval_set(4)
    train = compositional_split(PipelineConfig(n_identities=12), 1)
    train_params = {p.vector().tobytes() for p in train.identities.values()}
    assert not any(p.vector().tobytes() in train_params for p in es.identities)


def test_evaluate_is_deterministic_and_bounded(tiny_bundle, eval_set):
    a, b = evaluate(tiny_bundle, eval_set, CFG), evaluate(tiny_bundle, eval_set, CFG)
    assert a.identity_score == b.identity_score and a.controllability_score == b.controllability_score
    assert -1 <= a.identity_score <= 1 and 0 <= a.controllability_score <= 1
    assert a.n_samples == 6
    assert set(a.attribute_accuracy) == {"background", "style", "accessory"}
    assert a.config["rescale"]["alpha"] == 1.2


def test_ablation_variants():
    v = ablation_configs(RescaleConfig())
    assert list(v) == ["Var A", "Var B", "Var C", "Var D", "Full", "Base", "No rescaling"]
    assert not v["Var A"].text_enabled and v["Var A"].adapter_enabled
    assert not v["Var B"].adapter_enabled and v["Var B"].text_enabled
    assert not v["Var C"].text_rescale and v["Var C"].merge_mode == "normalized"
    assert v["Var D"].merge_mode == "uniform_lambda" and v["Var D"].lam == 1.0 and v["Var D"].text_rescale
    assert not v["Base"].adapter_enabled and not v["Base"].text_enabled
    assert len(ablation_configs(include_reference=False)) == 5


def test_sentinel_is_var_c_plus_var_d():
    v = ablation_configs(RescaleConfig())
    combined = v["Var C"].replace(merge_mode=v["Var D"].merge_mode, lam=v["Var D"].lam)
    assert no_rescaling_config() == combined == v["No rescaling"]


def test_ablation_suite_and_csv(tiny_bundle, eval_set, tmp_path):
    reports = ablation_suite(tiny_bundle, eval_set, CFG)
    assert list(reports) == ["Var A", "Var B", "Var C", "Var D", "Full"]
    path = write_reports_csv(tmp_path / "t.csv", reports)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("variant,identity_score,controllability_score")
    assert len(lines) == 6


def test_one_by_one_grid_equals_evaluate(tiny_bundle, eval_set, tmp_path):
    grid = grid_search(tiny_bundle, [0.8], [1.4], eval_set, CFG)
    direct = evaluate(tiny_bundle, eval_set, CFG.replace(rescale=RescaleConfig(alpha=0.8, beta=1.4)))
    assert grid.cells[0, 0, 0] == direct.identity_score
    assert grid.cells[0, 0, 1] == direct.controllability_score
    sentinel = evaluate(tiny_bundle, eval_set, CFG.replace(rescale=no_rescaling_config()))
    assert grid.sentinel.identity_score == sentinel.identity_score
    rows = read_grid_csv(grid.write_csv(tmp_path / "g.csv"))
    assert [r["alpha"] for r in rows] == [0.8, SENTINEL]
    assert rows[0]["identity_score"] == direct.identity_score


def test_grid_validation(tiny_bundle, eval_set):
    with pytest.raises(ValidationError):
        grid_search(tiny_bundle, [], [1.0], eval_set, CFG)
    with pytest.raises(ValidationError):
        HeatmapGrid([1.0], [1.0, 2.0], np.zeros((1, 1, 2)))


def test_trend_inversions():
    cells = np.zeros((4, 3, 2))
    cells[:, :, 0] = np.array([0.1, 0.2, 0.15, 0.3])[:, None]
    grid = HeatmapGrid([0.4, 0.6, 0.8, 1.0], [1.6, 1.8, 2.0], cells)
    assert identity_trend_inversions(grid) == 1
    cells[:, 1, 0] = [0.1, 0.2, 0.3, 0.4]
    cells[:, 0, 0] = cells[:, 2, 0] = [0.1, 0.2, 0.3, 0.4]
    assert identity_trend_inversions(grid) == 0


def test_profile_norms(tiny_bundle, tmp_path):
    from dualid.data.synth import SplitSpec, sample_dataset
    imgs = sample_dataset(3, 2, SplitSpec("portrait"), seed=0).images
    a = profile_norms(tiny_bundle, imgs, n_timesteps=2)
    b = profile_norms(tiny_bundle, imgs, n_timesteps=2)
    assert np.array_equal(a.site_mean, b.site_mean)
    assert np.all(np.isfinite(a.site_mean)) and np.all(a.site_mean > 0) and a.text_mean > 0
    text = a.write_csv(tmp_path / "p.csv").read_text().splitlines()
    assert text[0] == "site_index,mean_ratio,std_ratio" and text[-1].startswith("text,")


def test_bench_single_rep(tiny_bundle):
    rep = bench(tiny_bundle, batch_size=2, reps=1, steps=2)
    assert set(rep.seconds) == set(BENCH_MODES)
    assert rep.overhead_pct["base"] == 0.0
    assert all(s > 0 for s in rep.seconds.values())
    assert "dual" in rep.text()
    with pytest.raises(ValidationError):
        bench(tiny_bundle, reps=0)
