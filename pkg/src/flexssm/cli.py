"""Command-line entry point: ``flexssm <command> [flags]``.

Every command accepts ``--config FILE``, a flat ``key = value`` file whose keys are
the long flag names (dashes or underscores).  Flags given on the command line win
over file values.  Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluate as ev
from .flex import STRATEGIES, FlexSets
from .model import ModelDims, load_checkpoint
from .synth import DatasetManifest, generate
from .tensor import NonFiniteError
from .train import ClipRenderer, ConfigError, TrainConfig, save_run, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MANIFEST_NAME = "manifest.json"
_DIM_FIELDS = ("D", "expand", "n_state", "n_blocks", "k", "num_classes")

log = logging.getLogger("flexssm")


# ---------------------------------------------------------------------------
# helpers


def int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def parse_dims(text: str) -> ModelDims:
    """``"D=64,n_blocks=4"`` style overrides on top of the default dims."""
    kw = {}
    for item in filter(None, str(text).replace(" ", "").split(",")):
        key, _, val = item.partition("=")
        if key == "bidirectional":
            kw[key] = val.lower() in ("1", "true", "yes", "on")
        elif key in _DIM_FIELDS:
            kw[key] = int(val)
        else:
            raise ConfigError(f"unknown dims key {key!r}; valid: {', '.join(_DIM_FIELDS + ('bidirectional',))}")
    return ModelDims(**kw)


def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def apply_config_file(sub: argparse.ArgumentParser, path) -> None:
    """Install file values as parser defaults, so explicit flags still take precedence."""
    values = read_config_file(path)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    defaults = {}
    for key, val in values.items():
        act = actions[key]
        if act.nargs == 0:
            defaults[key] = _bool(val)
        elif act.type is not None:
            try:
                defaults[key] = act.type(val)
            except (argparse.ArgumentTypeError, ValueError) as e:
                raise ConfigError(f"{path}: bad value for {key}: {e}") from None
        else:
            defaults[key] = val
        if act.choices is not None and defaults[key] not in act.choices:
            raise ConfigError(f"{path}: {key} must be one of {', '.join(map(str, act.choices))}")
    sub.set_defaults(**defaults)


def _check_out_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise ConfigError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise ConfigError(f"{path} is not empty; pass --force to overwrite")


def _manifest_path(p) -> Path:
    p = Path(p)
    p = p / MANIFEST_NAME if p.is_dir() else p
    if not p.is_file():
        raise ConfigError(f"dataset manifest not found: {p}")
    return p


def _checkpoint_path(p) -> Path:
    p = Path(p)
    p = p / "checkpoint.ssnk" if p.is_dir() else p
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return p


def _flex_sets(preset: str) -> FlexSets:
    return FlexSets.desk() if preset == "desk" else FlexSets()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(a) -> int:
    out = Path(a.out)
    _check_out_dir(out, a.force)
    try:
        manifest = generate(a.per_class, a.split, a.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / MANIFEST_NAME)
    print(f"data_seed={a.seed}")
    for i, name in enumerate(manifest.classes):
        n = sum(c.class_id == i for c in manifest.clips)
        print(f"  {i}  {name:<16} {n}")
    print(f"{len(manifest.split('train'))} train / {len(manifest.split('test'))} test")
    print(f"wrote {out / MANIFEST_NAME}")
    return EXIT_OK


def _train_config(a) -> TrainConfig:
    dims = ModelDims(D=a.D, expand=a.expand, n_state=a.n_state, n_blocks=a.n_blocks, k=a.k,
                     num_classes=a.num_classes, bidirectional=not a.unidirectional)
    return TrainConfig(strategy=a.strategy, epochs=a.epochs, warmup_epochs=a.warmup_epochs,
                       batch_size=a.batch_size, base_lr=a.lr, weight_decay=a.weight_decay,
                       betas=(a.beta1, a.beta2), eps=a.eps, schedule=a.schedule, train_seed=a.train_seed,
                       dataset=str(_manifest_path(a.dataset)), dims=dims, flex=_flex_sets(a.flex_preset),
                       grad_clip=a.grad_clip, max_train_clips=a.max_train_clips, threads=a.threads,
                       init=a.init, embed_std=a.embed_std)


def cmd_train(a) -> int:
    cfg = _train_config(a)
    cfg.validate()
    out = Path(a.out)
    _check_out_dir(out, a.force)
    manifest = DatasetManifest.load(cfg.dataset)
    print(f"data_seed={manifest.seed} train_seed={cfg.train_seed} strategy={cfg.strategy}")
    result = train(cfg, manifest, renderer=ClipRenderer(threads=a.threads))
    paths = save_run(result, cfg, out)
    print(f"final loss {result.rows[-1]['loss']:.4f} after {len(result.rows)} steps")
    print(f"wrote {paths['checkpoint']} and {paths['metrics']}")
    return EXIT_OK


def cmd_sweep(a) -> int:
    ckpt = _checkpoint_path(a.checkpoint)
    manifest = DatasetManifest.load(_manifest_path(a.dataset))
    params = load_checkpoint(ckpt)
    rep = ev.sweep(params, manifest, a.grid_T, a.grid_H, a.patch_rule, strategy=a.strategy or a.patch_rule,
                   checkpoint_name=ckpt.name, batch_size=a.batch_size)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    main_csv, pairs_csv = rep.write(out)
    for c in rep.cells:
        acc = "failed: " + c.error if c.top1 is None else f"{c.top1:.3f}"
        print(f"T={c.T:<3} H={c.H:<4} P={c.P:<3} G={c.G:<3} L={c.seq_len:<6} {c.gflops:9.4f} GFLOPs  top1 {acc}")
    print(f"wrote {main_csv} and {pairs_csv}")
    return EXIT_OK


def cmd_flops(a) -> int:
    dims = parse_dims(a.dims)
    rows = []
    for T in a.grid_T:
        for H in a.grid_H:
            cfg = ev.sweep_config(a.patch_rule, T, H, a.P_def, a.G_def)
            rows.append((T, H, cfg.P, cfg.G, cfg.seq_len, ev.estimate_flops(cfg, dims)))
    print(f"{'T':>4} {'H':>5} {'P':>4} {'G':>4} {'seq_len':>8} {'GFLOPs':>12}")
    for T, H, P, G, L, gf in rows:
        print(f"{T:>4} {H:>5} {P:>4} {G:>4} {L:>8} {gf:>12.6f}")
    if len(rows) > 1:
        g = [r[-1] for r in rows]
        print(f"ratio max/min: {max(g) / min(g):.3f}x")
    print("T,H,P,G,seq_len,gflops")
    for r in rows:
        print(",".join(map(str, r[:-1])) + f",{r[-1]!r}")
    return EXIT_OK


def _single_cfg(a, params):
    return ev.sweep_config(a.patch_rule, a.T or params.T_def, a.H or params.P_def * params.G_def,
                           params.P_def, params.G_def)


def cmd_probe(a) -> int:
    params = load_checkpoint(_checkpoint_path(a.checkpoint))
    manifest = DatasetManifest.load(_manifest_path(a.dataset))
    cfg = _single_cfg(a, params)
    tr = ev.extract_features(params, manifest.split("train"), cfg)
    te = ev.extract_features(params, manifest.split("test"), cfg)
    probe = ev.ProbeConfig(epochs=a.probe_epochs, lr=a.probe_lr, weight_decay=a.probe_wd)
    acc = ev.linear_probe(tr, te, probe, num_classes=params.dims.num_classes)
    print(f"T={cfg.T} H={cfg.H} P={cfg.P} G={cfg.G} linear-probe top1 {acc:.4f}")
    print(f"retrieval top1 {ev.retrieval_top1(tr, te):.4f}")
    return EXIT_OK


def cmd_dump_features(a) -> int:
    params = load_checkpoint(_checkpoint_path(a.checkpoint))
    manifest = DatasetManifest.load(_manifest_path(a.dataset))
    cfg = _single_cfg(a, params)
    clips = manifest.clips if a.split == "all" else manifest.split(a.split)
    fs = ev.extract_features(params, clips, cfg)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ev.write_features(fs, out)
    print(f"wrote {len(fs)} x {fs.features.shape[1]} features to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key = value file with defaults for these flags")
    p.add_argument("--threads", type=int, default=1, help="upper bound on worker threads")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output location")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"),
                   help="logging verbosity")


def _geometry(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--dataset", required=True, help="manifest file or the directory holding it")
    p.add_argument("--T", type=int, default=None, help="frames (default: the checkpoint's T_def)")
    p.add_argument("--H", type=int, default=None, help="frame size (default: P_def * G_def)")
    p.add_argument("--patch-rule", choices=ev.PATCH_RULES, default="fixed", help="how P follows H")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="flexssm", description="Flexible spatio-temporal video SSM toolkit",
                                     formatter_class=fmt)
    subs = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = subs.add_parser("gen-data", help="write a synthetic dataset manifest", formatter_class=fmt)
    _common(p)
    p.add_argument("--out", default="data", help="output directory for manifest.json")
    p.add_argument("--per-class", type=int, default=25, help="clips per class")
    p.add_argument("--split", type=float, default=0.8, help="train fraction per class")
    p.add_argument("--seed", type=int, default=0, help="data seed")
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="train a model under one flexibility strategy", formatter_class=fmt)
    _common(p)
    p.add_argument("--dataset", default="data", help="manifest file or the directory holding it")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--strategy", choices=STRATEGIES, default="static-tokens", help="flexibility strategy")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--warmup-epochs", type=int, default=3, help="linear warmup epochs")
    p.add_argument("--batch-size", type=int, default=16, help="clips per batch")
    p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate")
    p.add_argument("--weight-decay", type=float, default=0.05, help="decoupled weight decay")
    p.add_argument("--beta1", type=float, default=0.9, help="AdamW beta1")
    p.add_argument("--beta2", type=float, default=0.999, help="AdamW beta2")
    p.add_argument("--eps", type=float, default=1e-8, help="AdamW epsilon")
    p.add_argument("--schedule", choices=("cosine", "constant"), default="cosine", help="post-warmup schedule")
    p.add_argument("--train-seed", type=int, default=0, help="seed for init, data order and flex sampling")
    p.add_argument("--grad-clip", type=float, default=None, help="global gradient-norm clip (off if unset)")
    p.add_argument("--max-train-clips", type=int, default=None, help="use only the first N training clips")
    p.add_argument("--flex-preset", choices=("desk", "full"), default="desk", help="sampling sets and defaults")
    p.add_argument("--D", type=int, default=64, help="embedding width")
    p.add_argument("--expand", type=int, default=2, help="inner expansion factor")
    p.add_argument("--n-state", type=int, default=8, help="SSM state size")
    p.add_argument("--n-blocks", type=int, default=4, help="number of blocks")
    p.add_argument("--k", type=int, default=4, help="depthwise conv width")
    p.add_argument("--num-classes", type=int, default=8, help="classifier outputs")
    p.add_argument("--unidirectional", action="store_true", help="disable the backward scan")
    p.add_argument("--init", choices=("fan-in", "std0.02"), default="fan-in", help="projection init scheme")
    p.add_argument("--embed-std", type=float, default=0.02, help="init std of positional/CLS embeddings")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("sweep", help="retrieval and GFLOPs over a (T, H) grid", formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--dataset", default="data", help="manifest file or the directory holding it")
    p.add_argument("--grid-T", type=int_list, default=[4, 8, 16], help="comma-separated frame counts")
    p.add_argument("--grid-H", type=int_list, default=[24, 32, 56, 96], help="comma-separated frame sizes")
    p.add_argument("--patch-rule", choices=ev.PATCH_RULES, default="static-tokens", help="how P follows H")
    p.add_argument("--strategy", default=None, help="strategy label for the report (default: the patch rule)")
    p.add_argument("--batch-size", type=int, default=32, help="clips per feature-extraction batch")
    p.add_argument("--out", default="sweep.csv", help="report CSV; a _pairs companion is written beside it")
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("flops", help="analytic GFLOPs table, no model needed", formatter_class=fmt)
    _common(p)
    p.add_argument("--dims", default="D=64,expand=2,n_state=8,n_blocks=4,k=4,num_classes=8",
                   help="comma-separated key=value model dims")
    p.add_argument("--grid-T", type=int_list, default=[4, 8, 16], help="comma-separated frame counts")
    p.add_argument("--grid-H", type=int_list, default=[24, 32, 56, 96], help="comma-separated frame sizes")
    p.add_argument("--patch-rule", choices=ev.PATCH_RULES, default="static-tokens", help="how P follows H")
    p.add_argument("--P-def", type=int, default=8, help="default patch size")
    p.add_argument("--G-def", type=int, default=7, help="default grid side")
    p.set_defaults(func=cmd_flops)

    p = subs.add_parser("probe", help="linear probe on frozen CLS features", formatter_class=fmt)
    _common(p)
    _geometry(p)
    p.add_argument("--probe-epochs", type=int, default=200, help="full-batch epochs")
    p.add_argument("--probe-lr", type=float, default=1e-2, help="probe learning rate")
    p.add_argument("--probe-wd", type=float, default=1e-4, help="probe weight decay")
    p.set_defaults(func=cmd_probe)

    p = subs.add_parser("dump-features", help="write CLS features to CSV", formatter_class=fmt)
    _common(p)
    _geometry(p)
    p.add_argument("--split", choices=("train", "test", "all"), default="all", help="which clips")
    p.add_argument("--out", default="features.csv", help="output CSV")
    p.set_defaults(func=cmd_dump_features)
    return parser


def _subparsers(parser) -> dict:
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices


def _find_config(argv) -> str | None:
    """The ``--config`` value, found before full parsing so file values can become defaults."""
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config = _find_config(argv)
        if config is not None and argv and argv[0] in _subparsers(parser):
            apply_config_file(_subparsers(parser)[argv[0]], config)
        args = parser.parse_args(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
