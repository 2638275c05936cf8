"""Command-line entry points: gen, train, eval, ablate, dump-attention.

Settings come from a flat ``key=value`` file (``--config``) with command-line
flags taking precedence. Every command echoes the effective settings to
``<out_dir>/config_<command>.txt``.

Exit codes: 0 success, 2 usage error, 3 data/checkpoint mismatch, 4 numeric
failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .ablation import Budget, run_ablation
from .data import DataError, Dataset, write_pgm
from .evaluate import eval_episodes, evaluate, oracle_predictor
from .model import EpisodeBatch, ModelConfig, ScapeModel, _parse_value
from .train import NumericFailure, train

log = logging.getLogger("scape")

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_KEYS = ("image_size", "patch_size", "d_model", "n_heads", "n_gkp_layers",
              "n_interactor_layers", "K_max", "n_filters", "af_hidden", "variant", "d_ff",
              "assign_dropout", "sigma", "gkp_query_ctx", "use_identifier", "support_pe")


@dataclass
class RunConfig:
    # data
    categories: int = 72
    data_seed: int = 0
    occlusion_p: float = 0.15
    # model
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 32
    n_heads: int = 4
    n_gkp_layers: int = 2
    n_interactor_layers: int = 4
    K_max: int = 12
    n_filters: int = 4
    af_hidden: int = 0
    variant: str = "scape"
    d_ff: int = 0
    assign_dropout: float = 0.1
    sigma: float = 1.0
    gkp_query_ctx: bool = True
    use_identifier: bool = True
    support_pe: bool = True
    # training
    seed: int = 0
    epochs: int = 180
    steps_per_epoch: int = 111
    batch_size: int = 16
    base_lr: float = 2e-4
    n_shot: int = 1
    supervise_occluded: bool = True
    # evaluation
    split: str = "test"
    eval_episodes: int = 300
    eval_seed: int = 1234
    oracle: bool = False
    episode_seed: int = 0
    # ablation
    variants: str = "scape,no_kar,no_gkp,shared_qk,mask_kk,matching_head,map_regression_head"
    seeds: str = "0,1,2,3,4"
    # paths
    out_dir: str = "runs/default"
    manifest: str = ""
    checkpoint: str = ""

    def model_config(self) -> ModelConfig:
        return ModelConfig(seed=self.seed, **{k: getattr(self, k) for k in MODEL_KEYS})

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest or os.path.join(self.out_dir, "manifest.csv"))

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint or os.path.join(self.out_dir, "model.ckpt"))

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def parse(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {f.name: getattr(base, f.name) for f in fields(cls)} if base else {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"line {n}: unknown setting {key!r}")
            values[key] = _parse_value(val, kinds[key])
        return cls(**values)


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


def _add_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file")
    for f in fields(RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper())


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if ns.config:
        try:
            cfg = RunConfig.parse(Path(ns.config).read_text(), cfg)
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
        except ValueError as e:
            raise UsageError(f"{ns.config}: {e}") from None
    overrides = "".join(f"{f.name}={getattr(ns, f.name)}\n" for f in fields(RunConfig)
                        if getattr(ns, f.name) is not None)
    try:
        cfg = RunConfig.parse(overrides, cfg)
        cfg.model_config()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return cfg


def _prepare_out(cfg: RunConfig, name: str) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(cfg.to_text())
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e}") from None
    return out


def _load_dataset(cfg: RunConfig) -> Dataset:
    path = cfg.manifest_path
    if not path.exists():
        raise MismatchError(f"manifest {path} not found (run gen first)")
    try:
        return Dataset.from_manifest(path.read_text(), cfg.occlusion_p, cfg.image_size)
    except (DataError, ValueError) as e:
        raise MismatchError(f"bad manifest {path}: {e}") from None


def _load_model(cfg: RunConfig) -> ScapeModel:
    path = cfg.checkpoint_path
    if not path.exists():
        raise MismatchError(f"checkpoint {path} not found")
    try:
        return checkpoint.load(path, cfg.model_config())
    except checkpoint.CheckpointError as e:
        raise MismatchError(str(e)) from None


# ---------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig) -> int:
    _prepare_out(cfg, "config_gen.txt")
    ds = Dataset.generate(cfg.categories, cfg.data_seed, cfg.occlusion_p, cfg.image_size,
                          max_k=min(10, cfg.K_max))
    path = cfg.manifest_path
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(ds.manifest())
    except OSError as e:
        raise UsageError(f"cannot write manifest: {e}") from None
    sizes = {s: len(v) for s, v in ds.splits.items()}
    print(f"wrote {path}: {cfg.categories} categories, splits {sizes}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _prepare_out(cfg, "config_train.txt")
    ds = _load_dataset(cfg)
    model = ScapeModel(cfg.model_config())
    steps = cfg.epochs * cfg.steps_per_epoch
    ckpt = cfg.checkpoint_path

    def on_epoch(epoch: int) -> None:
        checkpoint.save(model, ckpt)

    try:
        tlog = train(model, ds, steps, cfg.batch_size, cfg.base_lr, seed=cfg.seed, n_shot=cfg.n_shot,
                     steps_per_epoch=cfg.steps_per_epoch, supervise_occluded=cfg.supervise_occluded,
                     on_epoch=on_epoch)
    except NumericFailure as e:
        b = e.batch
        dump = out / "nan_batch.npz"
        np.savez(dump, support_images=b.support_images, support_kps=b.support_kps,
                 support_vis=b.support_vis, query_image=b.query_image, query_kps=b.query_kps,
                 query_vis=b.query_vis, valid=b.valid)
        print(f"error: {e}; last batch written to {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    checkpoint.save(model, ckpt)
    (out / "loss.csv").write_text(tlog.to_csv())
    print(f"trained {steps} steps; first loss {tlog.losses[0]:.4f}, last loss {tlog.losses[-1]:.4f}; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    out = _prepare_out(cfg, "config_eval.txt")
    ds = _load_dataset(cfg)
    predictor = oracle_predictor if cfg.oracle else _load_model(cfg)
    episodes = eval_episodes(ds, cfg.split, cfg.eval_episodes, cfg.n_shot, cfg.eval_seed)
    res = evaluate(predictor, episodes, cfg.K_max)
    s = res.summary()
    fmt = lambda v: "" if v is None else f"{v:.6f}"
    header = "split,n_shot,episodes,keypoints,pck,auc,nme,pck_symmetric,pck_occluded"
    row = f"{cfg.split},{cfg.n_shot},{len(episodes)},{res.n_keypoints}," + \
          ",".join(fmt(s[k]) for k in ("pck", "auc", "nme", "pck_symmetric", "pck_occluded"))
    (out / "metrics.csv").write_text(header + "\n" + row + "\n")
    print(" ".join(f"{k}={fmt(v)}" for k, v in s.items()))
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg, "config_ablate.txt")
    ds = _load_dataset(cfg)
    variants = [v for v in cfg.variants.split(",") if v]
    try:
        seeds = [int(s) for s in cfg.seeds.split(",") if s]
        for v in variants:
            ModelConfig(variant=v)
    except ValueError as e:
        raise UsageError(str(e)) from None
    budget = Budget(cfg.epochs * cfg.steps_per_epoch, cfg.batch_size, cfg.base_lr, cfg.n_shot,
                    cfg.eval_episodes, cfg.eval_seed, cfg.supervise_occluded)

    def progress(r):
        pck = r.metrics["pck"]
        print(f"{r.variant} seed {r.seed}: " + ("FAILED" if r.failed else f"pck {pck:.4f}"), flush=True)

    report = run_ablation(variants, seeds, budget, ds, cfg.model_config(), on_run=progress)
    (out / "ablation.csv").write_text(report.to_csv())
    (out / "ablation_summary.txt").write_text(report.summary())
    print(report.summary())
    return EXIT_OK


def kk_probabilities(logits: np.ndarray, k: int) -> np.ndarray:
    """Head-averaged softmax over the valid keypoint columns of ``[h, K, K]`` logits."""
    z = logits[:, :k, :k]
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)
    return p.mean(axis=0)


def attention_strip(maps: np.ndarray, grid: int, scale: int = 8) -> np.ndarray:
    """``[k, grid*grid]`` attention -> one image with a tile per keypoint, each
    tile scaled to its own maximum."""
    tiles = []
    for m in maps:
        t = m.reshape(grid, grid)
        t = t / t.max() if t.max() > 0 else t
        tiles.append(np.kron(t, np.ones((scale, scale))))
    return np.concatenate(tiles, axis=1)


def cmd_dump_attention(cfg: RunConfig) -> int:
    if cfg.episode_seed < 0:
        raise UsageError("episode_seed must be non-negative")
    out = _prepare_out(cfg, "config_dump.txt")
    ds = _load_dataset(cfg)
    model = _load_model(cfg)
    mc = model.cfg
    ep = ds.sample_episode(cfg.split, cfg.n_shot, np.random.default_rng([cfg.eval_seed, cfg.episode_seed]))
    batch = EpisodeBatch.from_episodes([ep], mc.K_max)
    rec = model.forward(batch, record=True, with_loss=False).record
    k, n, K = ep.k, mc.n_query_tokens, mc.K_max
    written = 0
    for li, layer in enumerate(rec.layers):
        # keypoint rows against the query-image columns (support image for a
        # support-only GKP context)
        cols = slice(K, K + n) if layer.kind == "interactor" else slice(layer.attn.shape[-1] - n, None)
        for h in range(layer.attn.shape[1]):
            img = attention_strip(layer.attn[0, h, :k, cols], mc.grid)
            write_pgm(out / f"layer{li:02d}_{layer.kind}_head{h}.pgm", img)
            written += 1
        if layer.kind == "interactor":
            for tag, logits in (("before", layer.kk_before), ("after", layer.kk_after)):
                p = kk_probabilities(logits[0], k)
                rows = [",".join(f"{v:.9f}" for v in r) for r in p]
                (out / f"layer{li:02d}_kk_{tag}.csv").write_text("\n".join(rows) + "\n")
                written += 1
    write_pgm(out / "query.pgm", ep.query.image)
    print(f"wrote {written} attention files to {out}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-attention": cmd_dump_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scape", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_flags(sub.add_parser(name))
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve_config(ns)
        return COMMANDS[ns.command](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
