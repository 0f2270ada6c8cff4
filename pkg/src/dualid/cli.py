"""Command line interface.

Every subcommand accepts ``--config FILE`` (key=value) whose keys are the
fields of :class:`RunConfig`; explicit flags override the file.  Each run
writes ``manifest.json`` into ``--out-dir``.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .base import ValidationError
from .branches.merge import DeadBranchError, RescaleConfig
from .checkpoint import CheckpointError
from .config import apply_overrides, read_kv
from .data.io import export_dataset, read_manifest, read_ppm, write_ppm
from .data.synth import Dataset, SplitSpec, sample_dataset
from .diffusion.sampling import SamplerConfig
from .pipeline import PipelineConfig, heldout_identities
from .text.vocab import UnknownWordError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_CORRUPT = 4
EXIT_DEAD_BRANCH = 5


@dataclass(frozen=True)
class RunConfig(PipelineConfig):
    """Pipeline settings plus sampling and rescaling options."""

    alpha: float = 1.2
    beta: float = 1.8
    merge_mode: str = "normalized"
    lam: float = 1.0
    adapter_enabled: bool = True
    text_enabled: bool = True
    per_token_text_rescale: bool = True
    text_rescale: bool = True
    steps: int = 30
    sampler: str = "deterministic"
    guidance_scale: float = 1.0
    clip_denoised: bool = True
    alphas: tuple[float, ...] = (0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8)
    betas: tuple[float, ...] = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4)
    eval_prompts: int = 32
    bench_batch_size: int = 8
    bench_reps: int = 3

    def rescale(self) -> RescaleConfig:
        return RescaleConfig(alpha=self.alpha, beta=self.beta, adapter_enabled=self.adapter_enabled,
                             text_enabled=self.text_enabled, merge_mode=self.merge_mode, lam=self.lam,
                             per_token_text_rescale=self.per_token_text_rescale, text_rescale=self.text_rescale)

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        return SamplerConfig(steps=self.steps, sampler=self.sampler, guidance_scale=self.guidance_scale,
                             rescale=self.rescale(), seed=self.seed if seed is None else seed,
                             clip_denoised=self.clip_denoised)


# flag name -> RunConfig key, for flags that override config values
_OVERRIDES = {
    "seed": "seed", "alpha": "alpha", "beta": "beta", "merge_mode": "merge_mode", "lam": "lam",
    "steps": "steps", "sampler": "sampler", "guidance_scale": "guidance_scale", "epochs": None,
    "lr": None, "alphas": "alphas", "betas": "betas", "identities": "eval_identities",
    "prompts_per_identity": "eval_prompts", "batch_size": "bench_batch_size", "reps": "bench_reps",
}


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualid", description="Dual-branch identity personalization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, help="key=value config file")
        sp.add_argument("--out-dir", type=Path, default=Path("runs") / name, help="where outputs and the manifest go")
        sp.add_argument("--seed", type=int)
        return sp

    def add_bundle(sp):
        sp.add_argument("--bundle", type=Path, required=True, help="directory of checkpoints")

    def add_rescale(sp):
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--merge-mode", choices=("normalized", "uniform_lambda"))
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--no-adapter", action="store_true")
        sp.add_argument("--no-text", action="store_true")
        sp.add_argument("--per-token-text-rescale", choices=("true", "false"))
        sp.add_argument("--steps", type=int)
        sp.add_argument("--sampler", choices=("deterministic", "ancestral"))
        sp.add_argument("--guidance-scale", type=float)

    sp = add("make-data", "render a synthetic dataset as PPM files plus manifest.tsv")
    sp.add_argument("--kind", choices=("compositional", "portrait"), default="compositional")
    sp.add_argument("--n-identities", type=int, default=64)
    sp.add_argument("--images-per-identity", type=int, default=32)
    sp.add_argument("--heldout-fraction", type=float, default=0.0)

    sp = add("train-encoder", "train the face encoder and the attribute classifier")
    sp.add_argument("--data", type=Path, help="manifest.tsv from make-data (default: generate from config)")
    sp.add_argument("--epochs", type=int)

    sp = add("pretrain", "train the base diffusion model")
    sp.add_argument("--data", type=Path, help="manifest.tsv of a compositional split")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("train-branch", "identity-focused training of one branch")
    add_bundle(sp)
    sp.add_argument("--branch", choices=("text", "adapter"), required=True)
    sp.add_argument("--data", type=Path, help="manifest.tsv of a portrait split")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("generate", "personalized sampling from a reference image")
    add_bundle(sp)
    add_rescale(sp)
    sp.add_argument("--ref", type=Path, required=True, help="reference face (PPM)")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--prompt", help='prompt, e.g. "a sketch of <id> on a blue background"')
    g.add_argument("--prompt-file", type=Path, help="one prompt per line (batch mode)")
    sp.add_argument("--out", type=Path, help="output PPM (single-prompt mode)")

    for name, text in (("evaluate", "identity and controllability scores"),
                       ("ablate", "ablation variants A-D, Full, Base and the no-rescaling row")):
        sp = add(name, text)
        add_bundle(sp)
        add_rescale(sp)
        sp.add_argument("--identities", type=int)
        sp.add_argument("--prompts-per-identity", type=int)

    sp = add("profile", "per-site norm ratios of the unrescaled branches")
    add_bundle(sp)
    sp.add_argument("--n-images", type=int, default=64)

    sp = add("grid-search", "(alpha, beta) sweep")
    add_bundle(sp)
    add_rescale(sp)
    sp.add_argument("--alphas", type=_float_list)
    sp.add_argument("--betas", type=_float_list)
    sp.add_argument("--identities", type=int)
    sp.add_argument("--prompts-per-identity", type=int)

    sp = add("bench", "timing of base, adapter-only, text-only and dual sampling")
    add_bundle(sp)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--steps", type=int)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None) is not None:
        cfg = apply_overrides(cfg, read_kv(args.config))
    updates = {}
    for flag, key in _OVERRIDES.items():
        if key and getattr(args, flag, None) is not None:
            updates[key] = getattr(args, flag)
    if getattr(args, "no_adapter", False):
        updates["adapter_enabled"] = False
    if getattr(args, "no_text", False):
        updates["text_enabled"] = False
    if getattr(args, "per_token_text_rescale", None) is not None:
        updates["per_token_text_rescale"] = args.per_token_text_rescale == "true"
    cfg = apply_overrides(cfg, updates)
    cfg.rescale()  # validates alpha/beta/lambda
    cfg.sampler_config().validate(200)
    return cfg


def dataset_from_manifest(path) -> Dataset:
    records = read_manifest(path)
    if not records:
        raise ValidationError(f"{path}: empty manifest")
    comps = [r["composition"] for r in records]
    kind = "portrait" if all(c.framing == "portrait" for c in comps) else "compositional"
    ids = sorted({r["identity_id"] for r in records})
    return Dataset(np.stack([r["pixels"] for r in records]), np.array([r["identity_id"] for r in records]),
                   comps, np.stack([r["caption"].ids for r in records]), {}, ids, [], kind)


def _manifest(args, cfg: RunConfig, outputs: dict, **extra):
    from .training import write_manifest
    losses = extra.pop("losses", None)
    return write_manifest(args.out_dir, args.command, cfg, cfg.seed, outputs, losses=losses, extra=extra or None)


# -- subcommands -------------------------------------------------------------------

def cmd_make_data(args, cfg):
    ds = sample_dataset(args.n_identities, args.images_per_identity,
                        SplitSpec(args.kind, args.heldout_fraction, cfg.portrait_background), seed=cfg.seed)
    manifest = export_dataset(ds, args.out_dir)
    _manifest(args, cfg, {"dataset": manifest}, n_images=len(ds), kind=args.kind)
    print(f"wrote {len(ds)} images to {manifest}")


def cmd_train_encoder(args, cfg):
    from .face import train_attribute_classifier, train_encoder
    from .pipeline import compositional_split
    ds = dataset_from_manifest(args.data) if args.data else compositional_split(cfg, cfg.encoder_images_per_identity)
    epochs = args.epochs or cfg.encoder_epochs
    enc = train_encoder(ds, epochs=epochs, seed=cfg.seed)
    att = train_attribute_classifier(ds, epochs=cfg.attribute_epochs, seed=cfg.seed)
    out = {"encoder": enc.save(args.out_dir / "encoder.uidc"), "attributes": att.save(args.out_dir / "attributes.uidc")}
    _manifest(args, cfg, out, losses=enc.loss_history_, separation_margin=enc.separation_margin_)
    print(f"encoder separation margin {enc.separation_margin_:.4f}")


def cmd_pretrain(args, cfg):
    from .diffusion.model import pretrain_base
    from .pipeline import compositional_split
    ds = dataset_from_manifest(args.data) if args.data else compositional_split(cfg, cfg.base_images_per_identity)
    base = pretrain_base(ds, epochs=args.epochs or cfg.base_epochs, lr=args.lr or cfg.base_lr, seed=cfg.seed,
                         batch_size=cfg.base_batch_size, c1=cfg.c1, c2=cfg.c2, caption_dropout=cfg.caption_dropout,
                         callback=lambda e, l: print(f"epoch {e} loss {l:.5f}", flush=True))
    path = base.save(args.out_dir / "base.uidc")
    _manifest(args, cfg, {"base": path}, losses=base.loss_history_)


def cmd_train_branch(args, cfg):
    from .diffusion.model import BaseDiffusion
    from .face import FaceEncoder
    from .inference import BUNDLE_FILES
    from .pipeline import portrait_split
    from .training import BranchTrainingConfig, train_branch
    base = BaseDiffusion.load(args.bundle / BUNDLE_FILES["base"])
    enc = FaceEncoder.load(args.bundle / BUNDLE_FILES["encoder"])
    ds = dataset_from_manifest(args.data) if args.data else portrait_split(cfg)
    epochs = args.epochs or (cfg.text_epochs if args.branch == "text" else cfg.adapter_epochs)
    lr = args.lr or (cfg.text_lr if args.branch == "text" else cfg.adapter_lr)
    bcfg = BranchTrainingConfig(args.branch, epochs, lr, cfg.branch_batch_size, cfg.seed)
    est = train_branch(base, enc, ds, bcfg, callback=lambda e, l: print(f"epoch {e} loss {l:.5f}", flush=True))
    path = est.save(args.out_dir / BUNDLE_FILES[args.branch])
    _manifest(args, cfg, {"branch": path}, losses=est.loss_history_, branch_config=bcfg)


def cmd_generate(args, cfg):
    from .inference import ModelBundle
    bundle = ModelBundle.load(args.bundle)
    ref = read_ppm(args.ref)
    feats = bundle.encoder.transform(ref[None])
    scfg = cfg.sampler_config()
    if args.prompt is not None:
        img = bundle.generate([args.prompt], feats, [scfg.seed], scfg)[0]
        out = args.out or args.out_dir / "generated.ppm"
        out.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(out, img)
        _manifest(args, cfg, {"image": out}, prompt=args.prompt)
        print(out)
        return
    prompts = [ln.strip() for ln in args.prompt_file.read_text().splitlines() if ln.strip()]
    if not prompts:
        raise ValidationError(f"{args.prompt_file}: no prompts")
    seeds = [scfg.seed + i for i in range(len(prompts))]
    imgs = bundle.generate(prompts, np.repeat(feats, len(prompts), axis=0), seeds, scfg)
    grid = args.out_dir / "images"
    grid.mkdir(parents=True, exist_ok=True)
    table = args.out_dir / "images.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "prompt", "seed", "path"])
        for i, (p, s, im) in enumerate(zip(prompts, seeds, imgs)):
            path = grid / f"{i:04d}.ppm"
            write_ppm(path, im)
            w.writerow([i, p, s, path.relative_to(args.out_dir)])
    _manifest(args, cfg, {"images": grid, "table": table})
    print(table)


def _eval_set(cfg: RunConfig, n_identities: int, n_prompts: int):
    from .diagnostics import make_eval_set
    return make_eval_set(heldout_identities(cfg, n_identities), seed=cfg.seed, n_prompts=n_prompts)


def cmd_evaluate(args, cfg):
    from .diagnostics import evaluate, write_reports_csv
    from .inference import ModelBundle
    bundle = ModelBundle.load(args.bundle)
    es = _eval_set(cfg, cfg.eval_identities, cfg.eval_prompts)
    rep = evaluate(bundle, es, cfg.sampler_config())
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = write_reports_csv(args.out_dir / "report.csv", {"evaluate": rep})
    text = (f"identity_score {rep.identity_score:.4f}\ncontrollability_score {rep.controllability_score:.4f}\n"
            f"n_samples {rep.n_samples}\nnote: identity is scored by the same frozen encoder that conditions "
            f"the branches\n")
    (args.out_dir / "report.txt").write_text(text)
    _manifest(args, cfg, {"report": path}, report=rep.as_row())
    print(text, end="")


def cmd_ablate(args, cfg):
    from .diagnostics import ablation_suite, write_reports_csv
    from .inference import ModelBundle
    bundle = ModelBundle.load(args.bundle)
    es = _eval_set(cfg, cfg.eval_identities, cfg.eval_prompts)
    reports = ablation_suite(bundle, es, cfg.sampler_config(), include_reference=True,
                             progress=lambda n, r: print(f"{n:>13s} identity {r.identity_score:.4f} "
                                                         f"controllability {r.controllability_score:.4f}", flush=True))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = write_reports_csv(args.out_dir / "ablation.csv", reports)
    _manifest(args, cfg, {"table": path})


def cmd_profile(args, cfg):
    from .diagnostics import profile_norms
    from .inference import ModelBundle
    from .pipeline import portrait_split
    bundle = ModelBundle.load(args.bundle)
    images = portrait_split(cfg).images[: args.n_images]
    prof = profile_norms(bundle, images, seed=cfg.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = prof.write_csv(args.out_dir / "profile.csv")
    _manifest(args, cfg, {"profile": path})
    print(path.read_text(), end="")


def cmd_grid_search(args, cfg):
    from .diagnostics import grid_search, identity_trend_inversions
    from .inference import ModelBundle
    bundle = ModelBundle.load(args.bundle)
    n_id = args.identities or cfg.grid_identities
    n_pr = args.prompts_per_identity or cfg.grid_prompts
    es = _eval_set(cfg, n_id, n_pr)
    grid = grid_search(bundle, cfg.alphas, cfg.betas, es, cfg.sampler_config(),
                       progress=lambda a, b, r: print(f"alpha {a} beta {b} identity {r.identity_score:.4f} "
                                                      f"controllability {r.controllability_score:.4f}", flush=True))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = grid.write_csv(args.out_dir / "grid.csv")
    inv = identity_trend_inversions(grid) if 1.8 in cfg.betas else None
    _manifest(args, cfg, {"grid": path}, identity_trend_inversions=inv)
    print(path)


def cmd_bench(args, cfg):
    from .diagnostics import bench
    from .inference import ModelBundle
    bundle = ModelBundle.load(args.bundle)
    rep = bench(bundle, cfg.bench_batch_size, cfg.bench_reps, cfg.steps, seed=cfg.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "bench.txt").write_text(rep.text() + "\n")
    _manifest(args, cfg, {"report": args.out_dir / "bench.txt"}, seconds=rep.seconds, overhead_pct=rep.overhead_pct)
    print(rep.text())
    if rep.overhead_pct["dual"] > 100.0:
        print("FAIL: dual-branch overhead exceeds 100% of base time", file=sys.stderr)
        return 1
    if rep.overhead_pct["dual"] > 50.0:
        print("warning: dual-branch overhead above the 50% soft threshold", file=sys.stderr)
    return 0


COMMANDS = {
    "make-data": cmd_make_data, "train-encoder": cmd_train_encoder, "pretrain": cmd_pretrain,
    "train-branch": cmd_train_branch, "generate": cmd_generate, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
    "profile": cmd_profile, "grid-search": cmd_grid_search, "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "generate" and args.prompt is None and args.out is not None:
            raise ValidationError("--out is for single-prompt mode; batch mode writes into --out-dir")
        return COMMANDS[args.command](args, cfg) or EXIT_OK
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except DeadBranchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEAD_BRANCH
    except (ValidationError, UnknownWordError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
