"""Command-line entry point: ``salmod {gen-data,gen-saliency,run,analyze}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import zlib
from pathlib import Path
from xml.etree import ElementTree

from . import plotting
from .analysis import AnalysisError, CorrelationPoint, CorrelationStudy, format_table, mean_nss, table_from_summaries, write_table
from .config import ConfigFileError, ExperimentConfig, dumps, load
from .data import DataError, Sample, generate, ingest_folder, make_split, read_index, write_dataset, write_index
from .model import save_checkpoint
from .netpbm import NetpbmError
from .pretrain import pretrain_all
from .saliency import SALIENCY_METHODS, SaliencyError, load_map, make_map, save_map
from .train import TrainingError, read_summary, scarce_protocol, write_grad_series

log = logging.getLogger("salmod")


class CommandError(RuntimeError):
    pass


# -- shared helpers ------------------------------------------------------------

def _config(path) -> ExperimentConfig:
    cfg = load(path)
    cfg.validate()
    return cfg


def _check_outputs(paths) -> None:
    """Every output must exist; SVGs must parse as XML."""
    for p in paths:
        p = Path(p)
        if not p.exists() or p.stat().st_size == 0:
            raise CommandError(f"output not written: {p}")
        if p.suffix == ".svg":
            try:
                ElementTree.parse(p)
            except ElementTree.ParseError as exc:
                raise CommandError(f"malformed SVG {p}: {exc}") from exc


def _map_for(cfg: ExperimentConfig, sample: Sample, seed: int, method: str | None = None,
             quality: float | None = None):
    s = cfg.saliency
    return make_map(method or s.method, sample.image, sample.mask,
                    quality=s.quality if quality is None else quality, seed=seed,
                    sigma_fraction=s.sigma_fraction, n_thresholds=s.n_thresholds)


def _import_map(folder: Path, sample: Sample):
    path = folder / f"{sample.name}.pgm"
    if not path.exists():
        raise CommandError(f"no imported saliency map for {sample.name}: {path}")
    return load_map(path, sample.mask.shape, normalize=True)


def _load_samples(cfg: ExperimentConfig):
    """Dataset from disk when present, otherwise generated in memory."""
    index = cfg.dataset_dir / "index.csv"
    if index.exists():
        samples = ingest_folder(cfg.dataset_dir, (cfg.data.height, cfg.data.width))
        return samples, make_split([s.label for s in samples], cfg.data.seed)
    return generate(cfg.data.spec())


def _attach(cfg: ExperimentConfig, samples: list[Sample]) -> list[Sample]:
    method = cfg.saliency.method
    if method == "none":
        return samples
    if method == "files":
        missing = [s.name for s in samples if s.saliency is None]
        if missing:
            raise CommandError(f"saliency.method=files but {len(missing)} samples have no map "
                               f"(first: {missing[0]}); run gen-saliency")
        return samples
    if method == "import":
        folder = Path(cfg.saliency.folder)
        return [dataclasses.replace(s, saliency=_import_map(folder, s)) for s in samples]
    return [dataclasses.replace(s, saliency=_map_for(cfg, s, cfg.saliency.seed + i))
            for i, s in enumerate(samples)]


def _base_saliency_fn(cfg: ExperimentConfig):
    if cfg.saliency.method not in SALIENCY_METHODS:
        return None
    base_seed = cfg.saliency.seed + 1_000_003

    def fn(sample: Sample):
        return _map_for(cfg, sample, base_seed + zlib.crc32(sample.name.encode()))
    return fn


def _report_dir(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / "runs" / (cfg.protocol.name or f"{cfg.net.variant}_{cfg.net.init}")


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    if cfg.data.folder:
        raise CommandError("gen-data writes a synthetic dataset; unset data.folder")
    samples, _ = generate(cfg.data.spec())
    root = cfg.dataset_dir
    try:
        index = write_dataset(samples, root)
    except OSError as exc:
        raise CommandError(f"cannot write dataset to {root}: {exc}") from exc
    if len(read_index(index)) != len(samples):
        raise CommandError(f"{index}: row count mismatch")
    print(f"wrote {len(samples)} samples to {root}")
    return 0


def cmd_gen_saliency(args) -> int:
    cfg = _config(args.config)
    method = args.method
    if method not in (*SALIENCY_METHODS, "import"):
        raise CommandError(f"unknown saliency method {method!r}; choose from {(*SALIENCY_METHODS, 'import')}")
    quality = cfg.saliency.quality if args.quality is None else args.quality
    if not 0.0 <= quality <= 1.0:
        raise CommandError("--quality must lie in [0,1]")
    if method == "import" and not cfg.saliency.folder:
        raise CommandError("method import reads from saliency.folder, which is not set")
    root = cfg.dataset_dir
    if not (root / "index.csv").exists():
        raise CommandError(f"no dataset at {root}; run gen-data first")
    rows = read_index(root / "index.csv")
    samples = ingest_folder(root)
    sub = f"oracle_q{quality:g}" if method == "oracle" else method
    out_dir = root / "saliency" / sub
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (row, sample) in enumerate(zip(rows, samples)):
        if method == "import":
            values = _import_map(Path(cfg.saliency.folder), sample)
        else:
            values = _map_for(cfg, sample, cfg.saliency.seed + i, method, quality)
        rel = f"saliency/{sub}/{sample.name}.pgm"
        save_map(values, root / rel)
        row[4] = rel
        written.append(root / rel)
    write_index(root / "index.csv", rows)
    _check_outputs(written)
    print(f"wrote {len(written)} {sub} maps under {out_dir}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args.config)
    samples, plan = _load_samples(cfg)
    num_classes = len(plan.classes)
    net = cfg.network(num_classes)
    net.validate()
    if args.grad_energy and not net.uses_saliency:
        raise CommandError("--grad-energy compares a saliency model with its baseline; "
                           "net.variant=baseline_rgb has no saliency branch")
    samples = _attach(cfg, samples)
    hyper = cfg.train.hyper()
    k_list = cfg.protocol.ks()

    bundle = None
    if net.init != "none":
        base, _ = generate(cfg.base_spec())
        bundle = pretrain_all(base, net, net.init, cfg.pretrain.hyper(), cfg.pretrain.seed,
                              _base_saliency_fn(cfg))

    out = _report_dir(cfg)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    report, states = scarce_protocol(samples, plan, net, hyper, k_list, cfg.protocol.seeds,
                                     pretrained=bundle, grad_energy=args.grad_energy,
                                     name=out.name, keep_states=True)

    written = [out / "results.csv", out / "summary.csv", out / "losses.csv", out / "config.txt",
               out / "meta.json", out / "accuracy_vs_k.svg"]
    report.write_results(written[0])
    report.write_summary(written[1])
    report.write_losses(written[2])
    written[3].write_text(dumps(cfg))
    for cell, state in zip(report.cells, states):
        path = out / "checkpoints" / f"k{cell.k}_seed{cell.seed}.ckpt"
        save_checkpoint(path, state, net)
        written.append(path)

    nss_value = mean_nss(samples, plan.test_ids(), seed=cfg.saliency.seed) if net.uses_saliency else None
    meta = {"name": report.name, "variant": net.variant, "init": net.init,
            "saliency": cfg.saliency.method, "k_list": [str(k) for k in k_list],
            "seeds": cfg.protocol.seeds, "config_digest": net.digest().hex(), "mean_nss": nss_value}
    written[4].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    summary = report.summary()
    plotting.accuracy_vs_k(written[5], [k for k, _, _ in summary], {report.name: [m for _, m, _ in summary]},
                           {report.name: [s for _, _, s in summary]})

    if args.grad_energy:
        paired = dataclasses.replace(net, variant="baseline_rgb", pool_position=None,
                                     init="none" if net.init == "none" else "scratch")
        base_report = scarce_protocol(samples, plan, paired, hyper, k_list, cfg.protocol.seeds,
                                      pretrained=bundle, grad_energy=True, name="baseline_rgb")
        base_report.write_results(out / "baseline_results.csv")
        written.append(out / "baseline_results.csv")
        for k in k_list:
            csv_path = out / f"grad_energy_k{k}.csv"
            svg_path = out / f"grad_energy_k{k}.svg"
            sal, ref = report.grad_series(k), base_report.grad_series(k)
            write_grad_series(csv_path, sal, ref)
            plotting.gradient_energy(svg_path, sal, ref)
            written += [csv_path, svg_path]

    _check_outputs(written)
    print(f"wrote report {report.name} to {out}")
    for k, m, s in summary:
        print(f"  k={k}: {m:.2f} +- {s:.2f}")
    return 0


def _read_report(path: Path):
    summary_path, meta_path = path / "summary.csv", path / "meta.json"
    if not summary_path.exists():
        raise CommandError(f"not a report directory (no summary.csv): {path}")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return meta.get("name", path.name), read_summary(summary_path), meta


def cmd_analyze(args) -> int:
    reports = [_read_report(Path(p)) for p in args.reports]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    k_list, rows = table_from_summaries([(name, summary) for name, summary, _ in reports])
    written = [out / "ablation_table.csv", out / "accuracy_vs_k.svg"]
    write_table(written[0], k_list, rows)
    print(format_table(k_list, rows))
    plotting.accuracy_vs_k(written[1], k_list,
                           {name: [m for _, m, _ in summary] for name, summary, _ in reports},
                           {name: [s for _, _, s in summary] for name, summary, _ in reports})

    if args.correlation:
        k = str(args.k)
        if k not in k_list:
            raise CommandError(f"--k {k} is not in the report k-list {k_list}")
        points = []
        for name, summary, meta in reports:
            if meta.get("mean_nss") is None:
                log.warning("report %s has no saliency NSS; left out of the correlation", name)
                continue
            acc = dict((kk, m) for kk, m, _ in summary)[k]
            points.append(CorrelationPoint(name, float(meta["mean_nss"]), acc))
        study = CorrelationStudy(points)
        r = study.coefficient
        study.write_csv(out / "correlation.csv")
        plotting.correlation_scatter(out / "correlation.svg", points, r)
        written += [out / "correlation.csv", out / "correlation.svg"]
        print(f"pearson r (NSS vs accuracy at k={k}) = {r:.4f}")

    _check_outputs(written)
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="salmod", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-saliency", help="write saliency maps and fill the index column")
    p.add_argument("--config", required=True)
    p.add_argument("--method", required=True, help=f"one of {', '.join((*SALIENCY_METHODS, 'import'))}")
    p.add_argument("--quality", type=float, default=None, help="oracle quality in [0,1]")
    p.set_defaults(func=cmd_gen_saliency)

    p = sub.add_parser("run", help="run the k-shot protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--grad-energy", action="store_true", help="record gradient energy against a paired baseline")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="tabulate and plot finished reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--correlation", action="store_true")
    p.add_argument("--k", default="5", help="k used for the correlation scatter")
    p.add_argument("--out", default="analysis", help="output directory")
    p.set_defaults(func=cmd_analyze)
    return parser


_EXPECTED = (CommandError, ConfigFileError, DataError, NetpbmError, SaliencyError, TrainingError,
             AnalysisError, ValueError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _EXPECTED as exc:
        print(f"salmod {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
