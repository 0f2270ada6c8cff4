import json

import numpy as np
import pytest

from dualid.base import ValidationError
from dualid.data.synth import SplitSpec, sample_dataset
from dualid.training import (DEFAULT_LR, BranchTrainingConfig, IdentityBranch, check_portrait_dataset,
                             train_adapter_branch, train_branch, train_text_branch, write_manifest)


@pytest.fixture(scope="module")
def portrait():
    return sample_dataset(6, 4, SplitSpec("portrait"), seed=3)


@pytest.fixture(scope="module")
def parts(tiny_bundle):
    return tiny_bundle.base, tiny_bundle.encoder


def _state(est):
    return {k: v.copy() for k, v in est.net_.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_config_defaults_and_validation():
    assert BranchTrainingConfig("text").lr == DEFAULT_LR["text"] == 1e-4
    assert BranchTrainingConfig("adapter").lr == DEFAULT_LR["adapter"] == 1e-5
    for bad in (dict(branch="both"), dict(learning_rate=0.0), dict(learning_rate=-1e-3), dict(epochs=0)):
        with pytest.raises(ValidationError):
            BranchTrainingConfig(**bad)


def test_non_portrait_data_rejected(parts):
    comp = sample_dataset(4, 4, seed=0)
    with pytest.raises(ValidationError, match="portrait"):
        train_text_branch(*parts, comp, BranchTrainingConfig("text", epochs=1))
    ds = sample_dataset(4, 2, SplitSpec("portrait"), seed=0)
    ds.head_boxes[1] = (10, 20, 10, 20)
    with pytest.raises(ValidationError, match="not portrait"):
        check_portrait_dataset(ds)


def test_wrong_branch_helpers(parts, portrait):
    with pytest.raises(ValidationError):
        train_text_branch(*parts, portrait, BranchTrainingConfig("adapter", epochs=1))
    with pytest.raises(ValidationError):
        train_adapter_branch(*parts, portrait, BranchTrainingConfig("text", epochs=1))


@pytest.mark.parametrize("branch", ["text", "adapter"])
def test_freeze_discipline(parts, portrait, branch):
    base, encoder = parts
    before_base, before_enc = _state(base), _state(encoder)
    est = IdentityBranch(branch=branch, epochs=1, learning_rate=1e-3, batch_size=8)
    untrained = _state(est.init_net(base))
    est.fit(portrait.images, base=base, encoder=encoder)
    assert _same(before_base, _state(base))
    assert _same(before_enc, _state(encoder))
    trained = _state(est)
    assert trained.keys() == untrained.keys()
    assert any(not np.array_equal(trained[k], untrained[k]) for k in trained)
    assert all(p.frozen for p in est.net_.parameters())


def test_trainable_set_is_exactly_the_branch(parts, portrait):
    base, encoder = parts
    est = IdentityBranch(branch="adapter").init_net(base)
    names = {n for n, p in est.net_.named_parameters() if not p.frozen}
    assert any(n.startswith("k_ip") for n in names) and any(n.startswith("qformer") for n in names)
    assert not any(n.startswith(("denoiser", "text_encoder", "trunk")) for n in names)


def test_unfrozen_base_rejected(parts, portrait):
    base, encoder = parts
    p = base.net_.parameters()[0]
    p.frozen = False
    try:
        with pytest.raises(ValidationError, match="unfrozen"):
            IdentityBranch(branch="text", epochs=1).fit(portrait.images, base=base, encoder=encoder)
    finally:
        p.frozen = True


def test_adapter_starts_from_text_projections(parts):
    base, _ = parts
    est = IdentityBranch(branch="adapter").init_net(base)
    for site, (k, v) in zip(base.denoiser.sites, est.projections):
        assert np.array_equal(k.weight.data, site.to_k.weight.data)
        assert np.array_equal(v.weight.data, site.to_v.weight.data)


def test_branch_order_independence_and_determinism(parts, portrait, tmp_path):
    def run(order):
        out = {}
        for b in order:
            out[b] = train_branch(*parts, portrait, BranchTrainingConfig(b, epochs=1, learning_rate=1e-3,
                                                                         batch_size=8, seed=7))
        return out

    a, b = run(["text", "adapter"]), run(["adapter", "text"])
    for name in ("text", "adapter"):
        a[name].save(tmp_path / f"a_{name}.uidc")
        b[name].save(tmp_path / f"b_{name}.uidc")
        assert (tmp_path / f"a_{name}.uidc").read_bytes() == (tmp_path / f"b_{name}.uidc").read_bytes()


def test_transform_shapes_and_round_trip(tiny_bundle, tmp_path):
    feats = np.random.default_rng(0).standard_normal((5, 32)).astype(np.float32)
    assert tiny_bundle.text_branch.transform(feats).shape == (5, 3, 64)
    assert tiny_bundle.adapter_branch.transform(feats).shape == (5, 4, 64)
    with pytest.raises(ValidationError):
        tiny_bundle.text_branch.transform(feats[:, :10])
    tiny_bundle.adapter_branch.save(tmp_path / "a.uidc")
    back = IdentityBranch.load(tmp_path / "a.uidc")
    assert np.array_equal(back.transform(feats), tiny_bundle.adapter_branch.transform(feats))
    assert back.get_params() == tiny_bundle.adapter_branch.get_params()
    assert len(back.projections) == 4


def test_manifest(tmp_path):
    path = write_manifest(tmp_path / "run", "train-text", BranchTrainingConfig("text", epochs=2), seed=3,
                          outputs={"checkpoint": tmp_path / "x.uidc"}, losses=[0.5, 0.25])
    rec = json.loads(path.read_text())
    assert rec["command"] == "train-text" and rec["seed"] == 3
    assert rec["config"]["epochs"] == 2
    assert rec["outputs"]["checkpoint"].endswith("x.uidc")
    lines = (tmp_path / "run" / "losses.csv").read_text().splitlines()
    assert lines == ["epoch,loss", "0,0.5", "1,0.25"]
