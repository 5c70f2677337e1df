"""Command-line entry point: generate / train / eval / rank / saliency / gradcheck.

Every flag mirrors a key of :class:`ExperimentConfig` (``--lr-ranker`` <->
``lr_ranker``). Values come from the built-in defaults, then an optional
``--config`` JSON file, then explicit flags. The resolved configuration is
written to ``<out>/config.json``; passing that file back with ``--config``
reproduces the run.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric-integrity error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint
from .data import DataError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .evaluate import evaluate_model, global_ranking, kendall_tau, score_images, subsample_pairs
from .nn import DEFAULT_LAYERS, FeatureExtractorSpec, RankModel
from .ranking import pair_loss
from .saliency import SmoothingConfig, export_heatmap, saliency_pair, write_map_csv
from .train import ConfigError, NumericIntegrityError, TrainConfig, train

log = logging.getLogger("relrank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class ExperimentConfig:
    """Every tunable of every command, with its default."""

    # paths
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    resume: str | None = None
    # synthetic data
    kind: str = "brightness"
    n_images: int = 200
    image_size: int = 32
    input_channels: int = 1
    n_train_pairs: int = 1000
    n_test_pairs: int = 300
    equality_fraction: float = 0.0
    test_image_fraction: float = 0.25
    noise: float = 0.0
    seed: int = 1
    # loading
    attribute: str | None = None
    resize: bool = False
    workers: int = 1
    # model and training
    layers: str = DEFAULT_LAYERS
    epochs: int = 25
    batch_pairs: int = 16
    lr_extractor: float = 1e-5
    lr_ranker: float = 1e-4
    weight_decay: float = 1e-5
    clip_lo: float = 1e-7
    clip_hi: float = 1.0 - 1e-7
    rho: float = 0.9
    eps: float = 1e-8
    freeze_extractor: bool = False
    decay_biases: bool = False
    # evaluation
    split: str = "test"
    epsilon: float | None = None
    subset_fraction: float = 1.0
    subset_seed: int = 0
    # saliency
    n_pairs: int = 8
    sigma: float = 2.0
    channels: str = "max"
    alpha: float = 0.6
    upscale: int = 8
    # gradcheck
    tolerance: float = 1e-4
    step: float = 1e-5
    max_coords: int = 20

    @classmethod
    def from_mapping(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known - {"command"})
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_pairs, self.lr_extractor, self.lr_ranker,
                           self.weight_decay, self.clip_lo, self.clip_hi, self.rho, self.eps,
                           self.seed, self.freeze_extractor, self.decay_biases)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.kind, self.n_images, self.image_size, self.n_train_pairs,
                             self.n_test_pairs, self.equality_fraction, self.seed,
                             self.test_image_fraction, self.noise)


_HELP = {
    "data": "dataset directory (images/, train_pairs.csv, test_pairs.csv)",
    "out": "output directory",
    "checkpoint": "model checkpoint to load",
    "resume": "checkpoint to continue training from",
    "kind": "synthetic attribute: brightness, blob_size or vertical_position",
    "layers": "extractor layers, e.g. conv8-3-1-1,pool2-2,dense64",
    "epsilon": "equality band for t=0.5 pairs (default 0.1 * score std)",
    "channels": "saliency channel reduction: max or sum",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of config keys (flags override it)")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS, help=_HELP.get(f.name))
            continue
        conv = {"int": int, "float": float, "float | None": float}.get(kind, str)
        p.add_argument(flag, dest=f.name, type=conv, default=argparse.SUPPRESS,
                       help=_HELP.get(f.name), metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relrank", description="Pairwise relative-attribute ranking experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [("generate", "write a synthetic dataset"),
                       ("train", "train one rank model"),
                       ("eval", "pairwise ordering accuracy of a checkpoint"),
                       ("rank", "global ordering of every image"),
                       ("saliency", "posterior saliency heatmaps for test pairs"),
                       ("gradcheck", "finite-difference check of the full pair loss")]:
        _add_flags(sub.add_parser(name, help=text))
    return parser


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    merged: dict = {}
    if args.config:
        try:
            merged.update(json.loads(Path(args.config).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    merged.update({k: v for k, v in vars(args).items() if k not in ("command", "config")})
    return ExperimentConfig.from_mapping(merged)


def _need(cfg: ExperimentConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise ConfigError("missing required flag(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _echo(cfg: ExperimentConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    d = {"command": command, **dataclasses.asdict(cfg)}
    (out / "config.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return out


def _load_model(cfg: ExperimentConfig) -> RankModel:
    model, _ = load_checkpoint(cfg.checkpoint)
    return model


def _load_data(cfg: ExperimentConfig):
    return load_dataset(cfg.data, attribute=cfg.attribute, resize=cfg.resize, workers=cfg.workers)


def cmd_generate(cfg: ExperimentConfig) -> int:
    _need(cfg, "out")
    try:
        ds, manifest = generate_synthetic(cfg.synthetic_spec())
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    out = _echo(cfg, "generate")
    save_dataset(ds, out, manifest)
    print(f"wrote {len(ds.samples)} images, {len(ds.train_pairs)} train / {len(ds.test_pairs)} test pairs to {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    _need(cfg, "data", "out")
    tcfg = cfg.train_config()
    ds = _load_data(cfg)
    if ds.image_shape is None:
        raise ConfigError("dataset contains no images")
    spec = FeatureExtractorSpec.parse(ds.image_shape, cfg.layers)
    model = state = None
    if cfg.resume:
        model, state = load_checkpoint(cfg.resume)
        if state is None:
            raise ConfigError(f"{cfg.resume} carries no optimizer state; cannot resume")
    out = _echo(cfg, "train")
    model, report, _ = train(ds, spec, tcfg, model=model, state=state, out_dir=out)
    mode = "frozen-extractor baseline" if tcfg.freeze_extractor else "full fine-tuning"
    for e in report.epochs:
        print(e.log_line())
    print(f"mode: {mode}; checkpoint: {report.checkpoint}")
    return EXIT_OK


def _pairs_for(cfg: ExperimentConfig, ds):
    if cfg.split not in ("train", "test"):
        raise ConfigError(f"split must be train or test, got {cfg.split!r}")
    pairs = ds.test_pairs if cfg.split == "test" else ds.train_pairs
    if cfg.subset_fraction != 1.0:
        pairs = subsample_pairs(pairs, cfg.subset_fraction, cfg.subset_seed)
    return pairs


def cmd_eval(cfg: ExperimentConfig) -> int:
    _need(cfg, "data", "checkpoint", "out")
    model = _load_model(cfg)
    ds = _load_data(cfg)
    pairs = _pairs_for(cfg, ds)
    out = _echo(cfg, "eval")
    res = evaluate_model(model, ds, pairs, cfg.epsilon)
    (out / "eval.json").write_text(res.to_json())
    print(f"ordered pairs: {res.n_ordered_pairs}, equality pairs: {res.n_equality_pairs}")
    if res.equality_accuracy is not None:
        print(f"equality_accuracy (|dr| <= {res.equality_epsilon:.4g}): {res.equality_accuracy:.4f}")
    print(f"{res.ordered_accuracy:.4f}" if res.defined else "nan")
    return EXIT_OK


def cmd_rank(cfg: ExperimentConfig) -> int:
    _need(cfg, "data", "checkpoint", "out")
    model = _load_model(cfg)
    ds = _load_data(cfg)
    out = _echo(cfg, "rank")
    ranking = global_ranking(score_images(model, ds))
    ranking.write_csv(out / "ranking.csv")
    summary = {"n_images": len(ranking)}
    truth = ds.latent()
    if len(truth) == len(ds.samples) and len(ranking) >= 2:
        summary["kendall_tau"] = kendall_tau(ranking, truth)
        print(f"kendall_tau vs latent strength: {summary['kendall_tau']:.4f}")
    (out / "rank.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {len(ranking)} rows to {out / 'ranking.csv'}")
    return EXIT_OK


def cmd_saliency(cfg: ExperimentConfig) -> int:
    _need(cfg, "data", "checkpoint", "out")
    model = _load_model(cfg)
    ds = _load_data(cfg)
    pairs = _pairs_for(cfg, ds)[:cfg.n_pairs]
    out = _echo(cfg, "saliency")
    smoothing = SmoothingConfig(cfg.sigma)
    rows = []
    for k, p in enumerate(pairs):
        xi, xj = ds.samples[p.id_i].pixels, ds.samples[p.id_j].pixels
        mi, mj = saliency_pair(model, xi, xj, smoothing, cfg.channels)
        for side, sid, m, x in (("i", p.id_i, mi, xi), ("j", p.id_j, mj, xj)):
            export_heatmap(m.values, x, out / f"pair{k:03d}_{side}.png", cfg.alpha, cfg.upscale)
            write_map_csv(m.values, out / f"pair{k:03d}_{side}.csv")
        rows.append({"pair": k, "image_i": p.id_i, "image_j": p.id_j, "target": p.t, "posterior": mi.posterior})
    (out / "saliency.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(f"wrote saliency maps for {len(rows)} pairs to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    _need(cfg, "out")
    shape = (cfg.input_channels, cfg.image_size, cfg.image_size)
    spec = FeatureExtractorSpec.parse(shape, cfg.layers)
    model = RankModel.initialize(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    xi, xj = rng.random(shape), rng.random(shape)
    post = cfg.train_config().posterior
    out = _echo(cfg, "gradcheck")
    report = ad.gradcheck(lambda: pair_loss(model, xi, xj, 1.0, post), dict(model.named_parameters()),
                          tolerance=cfg.tolerance, step=cfg.step, max_coords=cfg.max_coords, seed=cfg.seed)
    lines = report.lines() + [f"max_rel_err = {report.max_error:.3e}", "PASS" if report.passed else "FAIL"]
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "rank": cmd_rank,
    "saliency": cmd_saliency,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except NumericIntegrityError as exc:
        print(f"relrank: numeric integrity error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError, KeyError) as exc:
        print(f"relrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"relrank: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
