"""Command-line entry point: ``chagasnet {synth,pretrain,finetune,predict,evaluate,plot-dist}``.

Settings come from defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags (highest precedence).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("chagasnet")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # randomness and paths
    seed: int = 0
    data: str = ""
    run: str = "run"
    format: str = "csv_bundle"
    # synthetic data
    n_patients: int = 64
    n_ecgs: int = 256
    n_biomarkers: int = 11
    fs: float = 500.0
    duration_s: float = 10.0
    correlation_strength: float = 1.0
    missing_fraction: float = 0.3
    # preprocessing
    target_fs: float = 400.0
    snippet_s: float = 2.0
    kept_leads: str = "aVL,aVF,V1,V2,V3,V4,V5,V6"
    flat_eps: float = 1e-8
    # model
    stem_channels: int = 32
    n_blocks: int = 6
    inception_kernels: str = "9,19,39"
    n_filters: int = 32
    bottleneck: int = 32
    # optimizer
    pretrain_lr: float = 0.0037
    finetune_lr: float = 0.001
    muon_momentum: float = 0.95
    ns_iters: int = 14
    polish_iters: int = 3
    bin_smooth_beta: float = 1.0
    # training
    n_bins: int = 100
    window_h: float = 24.0
    val_fraction: float = 0.2
    pretrain_batch_size: int = 64
    finetune_batch_size: int = 128
    pretrain_max_epochs: int = 50
    finetune_max_epochs: int = 50
    patience: int = 10
    k_folds: int = 5
    parallel_folds: int = 1
    # inference and evaluation
    n_segments: int = 10
    threshold: float = 0.5
    top_fraction: float = 0.05

    def preprocess(self):
        from .preprocess import PreprocessConfig
        return PreprocessConfig(self.target_fs, self.snippet_s, _split(self.kept_leads), self.flat_eps)

    def model(self):
        from .model import ModelConfig
        pc = self.preprocess()
        return ModelConfig(n_leads=len(pc.kept_leads), input_len=pc.snippet_len,
                           stem_channels=self.stem_channels, n_blocks=self.n_blocks,
                           inception_kernels=tuple(int(k) for k in _split(self.inception_kernels)),
                           n_filters=self.n_filters, bottleneck=self.bottleneck)

    def train(self, phase: str):
        from .optim import OptimConfig
        from .train import TrainConfig
        pre = phase == "pretrain"
        optim = OptimConfig(lr=self.pretrain_lr if pre else self.finetune_lr, muon_momentum=self.muon_momentum,
                            ns_iters=self.ns_iters, polish_iters=self.polish_iters,
                            bin_smooth_beta=self.bin_smooth_beta)
        return TrainConfig(phase=phase,
                           batch_size=self.pretrain_batch_size if pre else self.finetune_batch_size,
                           max_epochs=self.pretrain_max_epochs if pre else self.finetune_max_epochs,
                           patience=self.patience, optim=optim, seed=self.seed,
                           val_fraction=self.val_fraction, snippet_len=self.preprocess().snippet_len,
                           flat_eps=self.flat_eps)

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def _split(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = type(getattr(RunConfig, key))
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(read_config(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    for key in _FIELDS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise UsageError(f"unknown key {key!r}")
        values[key] = _coerce(key, value.strip())
    return RunConfig(**values)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chagasnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        return sp

    s = common(sub.add_parser("synth", help="write a synthetic csv_bundle"))
    s.add_argument("--out", dest="data", required=True)
    s.add_argument("--n-ecgs", dest="n_ecgs", type=int)
    s.add_argument("--n-patients", dest="n_patients", type=int)
    s.add_argument("--n-biomarkers", dest="n_biomarkers", type=int)
    s.add_argument("--correlation-strength", dest="correlation_strength", type=float)

    s = common(sub.add_parser("pretrain", help="biomarker pretraining"))
    s.add_argument("--data")
    s.add_argument("--run")
    s.add_argument("--format")
    s.add_argument("--epochs", dest="pretrain_max_epochs", type=int)

    s = common(sub.add_parser("finetune", help="5-fold Chagas fine-tuning"))
    s.add_argument("--data")
    s.add_argument("--run")
    s.add_argument("--format")
    s.add_argument("--pretrained", help="pretraining checkpoint (default RUN/pretrain/checkpoint.pt)")
    s.add_argument("--cold-start", action="store_true", help="ablation: no pretrained weights")
    s.add_argument("--epochs", dest="finetune_max_epochs", type=int)
    s.add_argument("--parallel-folds", dest="parallel_folds", type=int)

    s = common(sub.add_parser("predict", help="ensemble prediction CSV"))
    s.add_argument("--data")
    s.add_argument("--run")
    s.add_argument("--format")
    s.add_argument("--models", nargs="+", help="fine-tuned checkpoints (default RUN/finetune/fold_*.pt)")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float)

    s = common(sub.add_parser("evaluate", help="challenge score, AUC and perplexity"))
    s.add_argument("--preds", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", help="write OUT.txt and OUT.json")
    s.add_argument("--checkpoint", help="pretraining checkpoint for biomarker perplexity")
    s.add_argument("--data", help="bundle with labs, used with --checkpoint")
    s.add_argument("--top-fraction", dest="top_fraction", type=float)

    s = common(sub.add_parser("plot-dist", help="predicted percentile distributions"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--format")
    s.add_argument("--out", required=True)
    s.add_argument("--biomarkers", help="semicolon-separated names (default: first four)")
    s.add_argument("--n-records", type=int, default=4)
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, args) -> None:
    from .ingest import SyntheticConfig, generate_synthetic, write_bundle
    scfg = SyntheticConfig(n_patients=cfg.n_patients, n_ecgs=cfg.n_ecgs, n_biomarkers=cfg.n_biomarkers,
                           fs=cfg.fs, duration_s=cfg.duration_s, correlation_strength=cfg.correlation_strength,
                           seed=cfg.seed, missing_fraction=cfg.missing_fraction)
    records, labs, labels = generate_synthetic(scfg)
    write_bundle(cfg.data, records, labs, labels)
    print(f"wrote {len(records)} records, {len(labs)} labs, {len(labels)} labels to {cfg.data}")


def _need_data(cfg):
    if not cfg.data:
        raise UsageError("--data is required")


def _biomarkers_in(labs):
    from .ingest import BIOMARKERS
    present = {lab.biomarker for lab in labs}
    ordered = [b for b in BIOMARKERS if b in present]
    return ordered + sorted(present - set(ordered))


def cmd_pretrain(cfg: RunConfig, args) -> None:
    import torch

    from .ingest import read_labs, read_records
    from .model import save_checkpoint
    from .train import build_pretrain_data, pretrain, write_metrics

    _need_data(cfg)
    torch.manual_seed(cfg.seed)
    records = read_records(cfg.data, cfg.format)
    labs = read_labs(cfg.data)
    train, val, binner = build_pretrain_data(records, labs, _biomarkers_in(labs), cfg.n_bins,
                                             cfg.val_fraction, cfg.seed, cfg.preprocess(), cfg.window_h)
    ckpt = pretrain(train, val, cfg.train("pretrain"), cfg.model(), binner)
    out = Path(cfg.run) / "pretrain"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dump())
    binner.save(out / "binner.txt")
    write_metrics(ckpt["meta"]["history"], out / "metrics.csv")
    save_checkpoint(ckpt, out / "checkpoint.pt")
    print(f"pretrain: selected epoch {ckpt['meta']['epoch']} val_loss {ckpt['meta']['val_loss']:.6g} -> {out / 'checkpoint.pt'}")


def cmd_finetune(cfg: RunConfig, args) -> None:
    from .ingest import read_labels, read_records
    from .labels import reconcile
    from .model import load_checkpoint, save_checkpoint
    from .train import build_finetune_data, finetune, make_folds, write_metrics

    _need_data(cfg)
    pretrained = None
    if not args.cold_start:
        path = Path(args.pretrained or Path(cfg.run) / "pretrain" / "checkpoint.pt")
        pretrained = load_checkpoint(path)
    records = read_records(cfg.data, cfg.format)
    resolved = reconcile(read_labels(cfg.data))
    data = build_finetune_data(records, resolved, cfg.preprocess())
    plan = make_folds(data.patient_ids, data.labels, cfg.k_folds, cfg.seed)
    ckpts = finetune(pretrained, data, plan, cfg.train("finetune"), allow_cold_start=args.cold_start,
                     model_cfg=cfg.model(), parallel=cfg.parallel_folds)
    out = Path(cfg.run) / "finetune"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dump())
    plan.save(out / "folds.csv")
    for ck in ckpts:
        fold = ck["meta"]["fold"]
        write_metrics(ck["meta"]["history"], out / f"metrics_fold_{fold}.csv")
        save_checkpoint(ck, out / f"fold_{fold}.pt")
        print(f"fold {fold}: epoch {ck['meta']['epoch']} val_loss {ck['meta']['val_loss']:.6g} "
              f"val_auc {ck['meta']['val_auc']:.4f}")


def cmd_predict(cfg: RunConfig, args) -> None:
    from .infer import predict_many, write_predictions
    from .ingest import read_records
    from .preprocess import prepare

    _need_data(cfg)
    models = args.models or sorted(str(p) for p in (Path(cfg.run) / "finetune").glob("fold_*.pt"))
    if not models:
        raise RuntimeError(f"no fine-tuned checkpoints under {Path(cfg.run) / 'finetune'}")
    pc = cfg.preprocess()
    records = [prepare(r, pc) for r in read_records(cfg.data, cfg.format)]
    preds = predict_many(records, models, n_segments=cfg.n_segments, w=pc.snippet_len, flat_eps=cfg.flat_eps)
    write_predictions(preds, args.out, cfg.threshold)
    print(f"wrote {len(preds)} predictions to {args.out}")


def _pretrain_eval_set(cfg, ckpt):
    from .binning import PercentileBinner, join
    from .ingest import read_labs, read_records
    from .preprocess import prepare
    from .train import PretrainData

    binner = PercentileBinner.from_dict(ckpt["meta"]["binner"])
    records = read_records(cfg.data, cfg.format)
    targets = join(records, read_labs(cfg.data), binner, cfg.window_h)
    kept = [r for r in records if r.record_id in targets]
    return PretrainData([prepare(r, cfg.preprocess()) for r in kept],
                        np.array([targets[r.record_id].bins for r in kept]),
                        np.array([targets[r.record_id].mask for r in kept]),
                        binner.biomarkers, binner.n_bins), binner


def cmd_evaluate(cfg: RunConfig, args) -> None:
    from .evaluation import evaluate, perplexity
    from .infer import read_predictions
    from .ingest import read_labels

    preds = read_predictions(args.preds)
    labels = {lab.record_id: int(lab.label >= 0.5) for lab in read_labels(args.labels)}
    ids = [rid for rid in preds if rid in labels]
    if not ids:
        raise RuntimeError("no record ids shared by predictions and labels")
    ppl = None
    if args.checkpoint:
        from .model import load_checkpoint, model_from_checkpoint
        from .train import pretrain_logits
        _need_data(cfg)
        ckpt = load_checkpoint(args.checkpoint)
        data, _ = _pretrain_eval_set(cfg, ckpt)
        logits = pretrain_logits(model_from_checkpoint(ckpt), data, cfg.train("pretrain")).double().numpy()
        ppl = perplexity(logits, data.bins, data.mask, data.biomarkers)
    report = evaluate([preds[i] for i in ids], [labels[i] for i in ids], cfg.top_fraction, ppl)
    print(report.to_text())
    if args.out:
        report.write(args.out)


def cmd_plot_dist(cfg: RunConfig, args) -> None:
    from .evaluation import emit_distribution_plot
    from .model import load_checkpoint, model_from_checkpoint
    from .train import pretrain_logits

    _need_data(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    data, binner = _pretrain_eval_set(cfg, ckpt)
    names = list(binner.biomarkers)
    subset = [s.strip() for s in args.biomarkers.split(";")] if args.biomarkers else names[:4]
    unknown = [s for s in subset if s not in names]
    if unknown:
        raise UsageError(f"unknown biomarker(s): {', '.join(unknown)}")
    cols = [names.index(s) for s in subset]
    # one record per patient, preferring records with every chosen biomarker present
    order = sorted(range(len(data)), key=lambda i: -int(data.mask[i, cols].sum()))
    chosen, patients = [], set()
    for i in order:
        if data.records[i].patient_id not in patients:
            chosen.append(i)
            patients.add(data.records[i].patient_id)
        if len(chosen) == args.n_records:
            break
    chosen = sorted(chosen)
    from .train import PretrainData
    sub = PretrainData([data.records[i] for i in chosen], data.bins[chosen], data.mask[chosen],
                       data.biomarkers, data.n_bins)
    logits = pretrain_logits(model_from_checkpoint(ckpt), sub, cfg.train("pretrain")).double().numpy()
    written = emit_distribution_plot(logits, sub.bins, sub.mask, subset, args.out, names,
                                     [r.record_id for r in sub.records])
    print(f"wrote {len(written)} files to {args.out}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "plot-dist": cmd_plot_dist,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required\n{parser.format_usage().strip()}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        reason = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {reason}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
