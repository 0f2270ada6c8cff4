"""Evaluation, ablations, norm profiling, (alpha, beta) grid search and timing."""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tensor, no_grad
from .base import ValidationError
from .branches.merge import BASE_ONLY, TRAINING_MERGE, RescaleConfig
from .data.synth import (PORTRAIT_COMPOSITION, CompositionParams, IdentityParams, all_compositions,
                         personalized_prompt, render_face, sample_identities)
from .diffusion.model import to_model_space
from .diffusion.sampling import SamplerConfig
from .diffusion.schedule import q_sample
from .diffusion.unet import DenoiserContext
from .face import ATTRIBUTES, SCORED_ATTRIBUTES, cosine_rows
from .training import ADAPTER_TRAINING_PROMPT

DEFAULT_ALPHAS = tuple(round(0.4 + 0.2 * i, 1) for i in range(8))
DEFAULT_BETAS = tuple(round(1.0 + 0.2 * i, 1) for i in range(8))
SENTINEL = -1.0


# -- evaluation sets -----------------------------------------------------------

@dataclass
class EvalSet:
    """Identities x prompts with one fixed seed per pair.

    ``references`` are clean portrait renders of each identity; prompts use
    the ``<id>`` placeholder.  ``compositions[j]`` is what prompt ``j`` asks for.
    """

    identities: list[IdentityParams]
    references: np.ndarray
    prompts: list[str]
    compositions: list[CompositionParams]
    seed: int = 0

    def __post_init__(self):
        if not self.identities or not self.prompts:
            raise ValidationError("empty evaluation set")

    @property
    def n_pairs(self) -> int:
        return len(self.identities) * len(self.prompts)

    def pairs(self):
        """Flattened (identity index, prompt index, seed) triples, identity-major."""
        n_p = len(self.prompts)
        for i in range(len(self.identities)):
            for j in range(n_p):
                yield i, j, self.seed * 1_000_003 + i * n_p + j

    def subset(self, n_identities: int | None = None, n_prompts: int | None = None) -> "EvalSet":
        ni = n_identities or len(self.identities)
        idx = _spread(len(self.prompts), n_prompts or len(self.prompts))
        return EvalSet(self.identities[:ni], self.references[:ni], [self.prompts[j] for j in idx],
                       [self.compositions[j] for j in idx], self.seed)


def _spread(n: int, k: int) -> list[int]:
    """``k`` indices spread evenly over ``range(n)``."""
    if k >= n:
        return list(range(n))
    return [int(i) for i in np.round(np.linspace(0, n - 1, k)).astype(int)]


def grammar_prompts() -> tuple[list[str], list[CompositionParams]]:
    comps = all_compositions()
    return [personalized_prompt(c) for c in comps], comps


def make_eval_set(identities, seed: int = 0, n_prompts: int | None = None) -> EvalSet:
    """Eval set over the full prompt grammar (or an even subset of it) for given identities."""
    idents = list(identities.values()) if isinstance(identities, dict) else list(identities)
    prompts, comps = grammar_prompts()
    idx = _spread(len(prompts), n_prompts or len(prompts))
    refs = np.stack([render_face(p, PORTRAIT_COMPOSITION).pixels for p in idents])
    return EvalSet(idents, refs, [prompts[j] for j in idx], [comps[j] for j in idx], seed)


def heldout_eval_set(n_identities: int = 32, seed: int = 10_000, n_prompts: int | None = None) -> EvalSet:
    """Fresh identities never seen in any training split (drawn from their own seed)."""
    rng = np.random.default_rng(seed)
    return make_eval_set(sample_identities(n_identities, rng, start_id=seed), seed=seed, n_prompts=n_prompts)


# -- evaluate ------------------------------------------------------------------

@dataclass
class EvalReport:
    identity_score: float
    controllability_score: float
    n_samples: int
    identity_sem: float = 0.0
    attribute_accuracy: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {"identity_score": self.identity_score, "controllability_score": self.controllability_score,
               "n_samples": self.n_samples, "identity_sem": self.identity_sem}
        row.update({f"acc_{k}": v for k, v in self.attribute_accuracy.items()})
        return row


def generate_eval_images(bundle, eval_set: EvalSet, cfg: SamplerConfig, batch_size: int = 128) -> np.ndarray:
    feats = bundle.encoder.transform(eval_set.references)
    pairs = list(eval_set.pairs())
    prompts = [eval_set.prompts[j] for _, j, _ in pairs]
    seeds = [s for _, _, s in pairs]
    features = feats[[i for i, _, _ in pairs]]
    return bundle.generate(prompts, features, seeds, cfg, batch_size=batch_size)


def score_images(bundle, eval_set: EvalSet, images: np.ndarray, cfg: SamplerConfig | None = None) -> EvalReport:
    if bundle.attributes is None:
        raise ValidationError("evaluation needs the attribute classifier")
    pairs = list(eval_set.pairs())
    ref_feats = bundle.encoder.transform(eval_set.references)[[i for i, _, _ in pairs]]
    gen_feats = bundle.encoder.transform(images)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sims = cosine_rows(gen_feats, ref_feats)
    pred = bundle.attributes.predict(images)
    acc = {}
    for key in SCORED_ATTRIBUTES:
        wanted = np.array([ATTRIBUTES[key].index(getattr(eval_set.compositions[j], key)) for _, j, _ in pairs])
        acc[key] = float(np.mean(pred[key] == wanted))
    return EvalReport(float(np.mean(sims)), float(np.mean(list(acc.values()))), len(pairs),
                      float(np.std(sims) / np.sqrt(len(sims))), acc,
                      {} if cfg is None else _cfg_echo(cfg))


def evaluate(bundle, eval_set: EvalSet, cfg: SamplerConfig, batch_size: int = 128) -> EvalReport:
    """Generate one image per (identity, prompt) pair and score identity and controllability."""
    images = generate_eval_images(bundle, eval_set, cfg, batch_size)
    return score_images(bundle, eval_set, images, cfg)


def _cfg_echo(cfg: SamplerConfig) -> dict:
    d = asdict(cfg)
    d["rescale"] = cfg.rescale.as_dict()
    return d


# -- ablations -------------------------------------------------------------------

def ablation_configs(rescale: RescaleConfig = RescaleConfig(), include_reference: bool = True) -> dict:
    """Variant name -> RescaleConfig.  ``Base`` and ``No rescaling`` are reference rows."""
    variants = {
        "Var A": rescale.replace(text_enabled=False),
        "Var B": rescale.replace(adapter_enabled=False),
        "Var C": rescale.replace(text_rescale=False),
        "Var D": rescale.replace(merge_mode="uniform_lambda", lam=1.0),
        "Full": rescale,
    }
    if include_reference:
        variants["Base"] = BASE_ONLY
        variants["No rescaling"] = no_rescaling_config(rescale)
    return variants


def no_rescaling_config(rescale: RescaleConfig = RescaleConfig()) -> RescaleConfig:
    """Raw splice plus raw ``H + H'`` merge: Var C and Var D combined."""
    return rescale.replace(text_rescale=False, merge_mode="uniform_lambda", lam=1.0,
                           adapter_enabled=True, text_enabled=True)


def ablation_suite(bundle, eval_set: EvalSet, cfg: SamplerConfig = SamplerConfig(),
                   include_reference: bool = False, progress=None) -> dict[str, EvalReport]:
    out = {}
    for name, rescale in ablation_configs(cfg.rescale, include_reference).items():
        out[name] = evaluate(bundle, eval_set, cfg.replace(rescale=rescale))
        if progress is not None:
            progress(name, out[name])
    return out


def write_reports_csv(path, reports: dict[str, EvalReport]) -> Path:
    path = Path(path)
    rows = [{"variant": k, **r.as_row()} for k, r in reports.items()]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


# -- norm inflation --------------------------------------------------------------

@dataclass
class NormProfile:
    site_mean: np.ndarray
    site_std: np.ndarray
    text_mean: float | None = None
    text_std: float | None = None
    dead_sites: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        rows = [{"site_index": i, "mean_ratio": float(m), "std_ratio": float(s)}
                for i, (m, s) in enumerate(zip(self.site_mean, self.site_std))]
        if self.text_mean is not None:
            rows.append({"site_index": "text", "mean_ratio": self.text_mean, "std_ratio": self.text_std})
        return rows

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["site_index", "mean_ratio", "std_ratio"])
            w.writeheader()
            for r in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return path


def profile_timesteps(T: int, n: int = 10) -> np.ndarray:
    return np.round(np.linspace(0, T - 1, n)).astype(np.int64)


def measure_norm_inflation(denoiser, schedule, x0: np.ndarray, text_context: np.ndarray, adapter_tokens,
                           adapter_proj, timesteps, seed: int = 0, e_prime=None, e_bar_norm: float | None = None
                           ) -> NormProfile:
    """Per-site mean and std of ``||H'|| / ||H||`` over samples and timesteps, raw merge.

    ``e_prime`` (N, 3, D) and ``e_bar_norm`` add the text-branch ratio
    ``||e'_k|| / ||e_bar||`` averaged over samples and the three slots.
    """
    rng = np.random.default_rng(seed)
    n = len(x0)
    ratios: dict[int, list] = {}
    with no_grad():
        for t in timesteps:
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            x_t = q_sample(schedule, x0, np.full(n, int(t)), eps)
            rec = []
            ctx = DenoiserContext(Tensor(text_context), adapter_tokens=Tensor(adapter_tokens),
                                  adapter_proj=adapter_proj, rescale=TRAINING_MERGE, recorder=rec)
            denoiser(x_t, int(t), ctx)
            for site, r in rec:
                ratios.setdefault(site, []).append(r)
    sites = sorted(ratios)
    allr = [np.concatenate(ratios[s]) for s in sites]
    mean = np.array([r.mean() for r in allr])
    std = np.array([r.std() for r in allr])
    dead = [s for s, m in zip(sites, mean) if m == 0.0]
    if dead:
        warnings.warn(f"adapter output is zero at sites {dead}: dead adapter", RuntimeWarning, stacklevel=2)
    prof = NormProfile(mean, std, dead_sites=dead)
    if e_prime is not None:
        tr = np.sqrt(np.sum(np.asarray(e_prime, dtype=np.float64) ** 2, axis=-1)) / e_bar_norm
        prof.text_mean, prof.text_std = float(tr.mean()), float(tr.std())
    return prof


def profile_norms(bundle, images: np.ndarray, n_timesteps: int = 10, seed: int = 0) -> NormProfile:
    """Norm-inflation profile of the trained branches on a portrait batch (no rescaling)."""
    feats = bundle.encoder.transform(images)
    emb, _ = bundle.base.encode_prompts([ADAPTER_TRAINING_PROMPT] * len(images))
    tokens = bundle.adapter_branch.transform(feats)
    e_prime = bundle.text_branch.transform(feats) if bundle.text_branch is not None else None
    return measure_norm_inflation(bundle.base.denoiser, bundle.base.schedule, to_model_space(images), emb, tokens,
                                  bundle.adapter_branch.projections, profile_timesteps(bundle.base.T, n_timesteps),
                                  seed, e_prime, bundle.e_bar.norm)


# -- grid search -----------------------------------------------------------------

@dataclass
class HeatmapGrid:
    alphas: list
    betas: list
    cells: np.ndarray                   # (|alphas|, |betas|, 2): identity, controllability
    sentinel: EvalReport | None = None
    reports: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cells.shape[:2] != (len(self.alphas), len(self.betas)):
            raise ValidationError("cell count does not match the axes")

    def rows(self) -> list[tuple]:
        rows = [(a, b, float(self.cells[i, j, 0]), float(self.cells[i, j, 1]))
                for i, a in enumerate(self.alphas) for j, b in enumerate(self.betas)]
        if self.sentinel is not None:
            rows.append((SENTINEL, SENTINEL, self.sentinel.identity_score, self.sentinel.controllability_score))
        return rows

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "beta", "identity_score", "controllability_score"])
            for a, b, i, c in self.rows():
                w.writerow([a, b, repr(i), repr(c)])
        return path


def read_grid_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def grid_search(bundle, alphas=DEFAULT_ALPHAS, betas=DEFAULT_BETAS, eval_set: EvalSet | None = None,
                cfg: SamplerConfig = SamplerConfig(), include_sentinel: bool = True, progress=None) -> HeatmapGrid:
    """Evaluate every (alpha, beta) cell with the same seed table, plus the raw-merge sentinel."""
    alphas, betas = list(alphas), list(betas)
    if not alphas or not betas:
        raise ValidationError("grid axes must be non-empty")
    if eval_set is None:
        raise ValidationError("grid_search needs an evaluation set")
    cells = np.zeros((len(alphas), len(betas), 2))
    reports = {}
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            r = evaluate(bundle, eval_set, cfg.replace(rescale=cfg.rescale.replace(alpha=a, beta=b)))
            cells[i, j] = (r.identity_score, r.controllability_score)
            reports[(a, b)] = r
            if progress is not None:
                progress(a, b, r)
    sentinel = evaluate(bundle, eval_set, cfg.replace(rescale=no_rescaling_config(cfg.rescale))) \
        if include_sentinel else None
    return HeatmapGrid(alphas, betas, cells, sentinel, reports)


def identity_trend_inversions(grid: HeatmapGrid, beta: float = 1.8, window: int = 1) -> int:
    """Number of decreases in identity score along alpha at ``beta``.

    The column is first smoothed by averaging each cell with its ``window``
    neighbours along beta.
    """
    j = int(np.argmin([abs(b - beta) for b in grid.betas]))
    lo, hi = max(0, j - window), min(len(grid.betas), j + window + 1)
    col = grid.cells[:, lo:hi, 0].mean(axis=1)
    return int(np.sum(np.diff(col) < 0))


# -- timing ----------------------------------------------------------------------

BENCH_MODES = {
    "base": BASE_ONLY,
    "adapter_only": RescaleConfig(text_enabled=False),
    "text_only": RescaleConfig(adapter_enabled=False),
    "dual": RescaleConfig(),
}


@dataclass
class BenchReport:
    batch_size: int
    reps: int
    steps: int
    seconds: dict
    overhead_pct: dict

    def text(self) -> str:
        lines = [f"batch_size={self.batch_size} reps={self.reps} steps={self.steps}"]
        for mode, s in self.seconds.items():
            lines.append(f"{mode:>13s}  median {s:8.4f} s  overhead {self.overhead_pct[mode]:+7.2f}%")
        return "\n".join(lines)


def bench(bundle, batch_size: int = 8, reps: int = 3, steps: int = 30, seed: int = 0) -> BenchReport:
    """Median wall-clock time of personalized sampling per mode, pinned to one BLAS thread.

    Each timing covers the whole request: identity features, branch
    mapping, conditioning and the denoising loop.
    """
    if batch_size < 1 or reps < 1:
        raise ValidationError("batch_size and reps must be >= 1")
    rng = np.random.default_rng(seed)
    refs = np.stack([render_face(p, PORTRAIT_COMPOSITION).pixels
                     for p in sample_identities(batch_size, rng).values()])
    prompts = [personalized_prompt(c) for c in all_compositions()][:batch_size]
    prompts = (prompts * (batch_size // len(prompts) + 1))[:batch_size]
    seeds = list(range(seed, seed + batch_size))
    times = {}
    with threadpool_limits(limits=1):
        for mode, rescale in BENCH_MODES.items():
            cfg = SamplerConfig(steps=steps, rescale=rescale, seed=seed)
            runs = []
            for _ in range(reps):
                t0 = time.perf_counter()
                feats = bundle.encoder.transform(refs)
                bundle.generate(prompts, feats, seeds, cfg, batch_size=batch_size)
                runs.append(time.perf_counter() - t0)
            times[mode] = float(np.median(runs))
    overhead = {m: 100.0 * (t - times["base"]) / times["base"] for m, t in times.items()}
    return BenchReport(batch_size, reps, steps, times, overhead)
