"""
命令行入口

    python -m src.cli gen    [config.json] [--seed S] [--out DIR]
    python -m src.cli run    [--config F] [--strategy ...] [--fmr ...] [--trials T] [--seed S] [--out DIR]
    python -m src.cli report --in report.csv

Exit codes: 0 success, 2 usage / configuration error, 3 numerical failure
(including runs that finished with failure rows). Progress goes to stderr,
data goes to files; only ``report`` prints to stdout.
"""
import argparse
import logging
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Dict, List, Optional

from src import __version__
from src.config import settings
from src.data_models import DEFAULT_STRATEGIES, STRATEGIES, RunManifest, config_snapshot, load_experiment_config
from src.errors import ConfigurationError, MasterPrintError, NumericalError, ReportError, UsageError
from src.experiment import CoverageReport, run_experiment, trial_seed
from src.generator import build_generator, save_generator
from src.population import save_gallery, split_train_test
from src.report import read_summary_csv, render_table, write_rows_csv, write_summary_csv
from src.utils import STREAM_GALLERY, STREAM_GENERATOR, atomic_write_text, derive_seed, setup_logger

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def component_versions() -> Dict[str, str]:
    versions = {"masterprint": __version__}
    for package in ("numpy", "pandas", "pydantic"):
        try:
            versions[package] = version(package)
        except PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def _header_lines(config, command: str) -> List[str]:
    return [
        f"masterprint {__version__} {command}",
        f"master_seed={config.master_seed}",
        f"config={config_snapshot(config)}",
    ]


def _write_manifest(out: Path, manifest: RunManifest) -> Path:
    path = out / "manifest.json"
    manifest.add_artifact(path.name)
    return atomic_write_text(path, manifest.model_dump_json(indent=2))


def cmd_gen(args) -> int:
    """
    生成 train/test 图库和生成器文件（与 run 的第 0 次试验使用同一种子派生）。
    """
    started = time.perf_counter()
    config_path = args.config if args.config is not None else settings.default_config_path
    config = load_experiment_config(config_path, {"master_seed": args.seed})
    out = Path(args.out)

    seed = trial_seed(config.master_seed, 0)
    train, test = split_train_test(config.gallery, derive_seed(seed, STREAM_GALLERY))
    params = build_generator(
        config.gallery.feature_dim,
        config.generator.latent_dim,
        derive_seed(seed, STREAM_GENERATOR),
        train,
        config.generator.center_weight,
        config.generator.noise_weight,
    )

    manifest = RunManifest(
        command="gen",
        config=config.model_dump(mode="json"),
        seed=config.master_seed,
        component_versions=component_versions(),
    )
    for name, writer, obj in (
        ("gallery_train.json", save_gallery, train),
        ("gallery_test.json", save_gallery, test),
        ("generator.json", save_generator, params),
    ):
        writer(obj, out / name)
        manifest.add_artifact(name)
        logger.info(f"Wrote {out / name}")
    manifest.timings["total_seconds"] = time.perf_counter() - started
    _write_manifest(out, manifest)
    return EXIT_OK


def _write_report(out: Path, report: CoverageReport, manifest: RunManifest) -> None:
    header = _header_lines(report.config, manifest.command)
    write_summary_csv(out / "report.csv", report, header)
    manifest.add_artifact("report.csv")
    write_rows_csv(out / "trials.csv", report.rows, header)
    manifest.add_artifact("trials.csv")
    atomic_write_text(out / "table.txt", "".join(f"# {line}\n" for line in header) + render_table(report))
    manifest.add_artifact("table.txt")
    atomic_write_text(out / "report.json", report.model_dump_json(indent=2))
    manifest.add_artifact("report.json")


def cmd_run(args) -> int:
    started = time.perf_counter()
    if args.strategy == "all":
        strategies = list(DEFAULT_STRATEGIES)
    else:
        strategies = [args.strategy] if args.strategy else None
    overrides = {
        "strategies": strategies,
        "fmr_levels": args.fmr,
        "trials": args.trials,
        "master_seed": args.seed,
    }
    config_path = args.config if args.config is not None else settings.default_config_path
    config = load_experiment_config(config_path, overrides)
    out = Path(args.out)
    jobs = args.jobs if args.jobs is not None else settings.JOBS
    if jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {jobs}")

    trace = args.trace or config.trace or settings.TRACE
    trace_dir = out / "traces" if trace else None
    dictionary_dir = out / "dictionaries" if args.save_dictionaries else None

    report = run_experiment(
        config,
        jobs=jobs,
        trace_dir=trace_dir,
        dictionary_dir=dictionary_dir,
        log_every=settings.LOG_EVERY,
    )

    manifest = RunManifest(
        command="run",
        config=config.model_dump(mode="json"),
        seed=config.master_seed,
        component_versions=component_versions(),
    )
    _write_report(out, report, manifest)
    for folder in (trace_dir, dictionary_dir):
        if folder is not None and folder.exists():
            for path in sorted(folder.glob("*.csv")) + sorted(folder.glob("*.json")):
                manifest.add_artifact(str(path.relative_to(out)))
    manifest.timings["total_seconds"] = time.perf_counter() - started
    manifest.exit_code = EXIT_NUMERICAL if report.failed else EXIT_OK
    _write_manifest(out, manifest)

    sys.stderr.write(render_table(report))
    if report.failed:
        logger.error(f"{len(report.failed)} cells failed; see trials.csv")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_report(args) -> int:
    cells = read_summary_csv(args.input)
    sys.stdout.write(render_table(cells))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masterprint", description="Diversity / Novelty MasterPrint 覆盖率实验")
    parser.add_argument("--verbose", "-v", action="store_true", help="DEBUG 日志")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="生成图库与生成器文件")
    gen.add_argument("config", nargs="?", default=None, help="实验配置 JSON，默认使用内置配置")
    gen.add_argument("--seed", type=int, default=None, help="覆盖 master_seed")
    gen.add_argument("--out", default=str(settings.OUTPUT_DIR), help="输出目录")

    run = sub.add_parser("run", help="运行实验矩阵并写出报告")
    run.add_argument("--config", default=None, help="实验配置 JSON，默认使用内置配置")
    run.add_argument("--strategy", choices=list(STRATEGIES) + ["all"], default=None,
                     help="策略；all 为 random/single/diversity/novelty，默认取配置文件")
    run.add_argument("--fmr", type=float, nargs="+", default=None, help="FMR 水平（小数，如 0.01）")
    run.add_argument("--trials", type=int, default=None)
    run.add_argument("--seed", type=int, default=None, help="覆盖 master_seed")
    run.add_argument("--out", default=str(settings.OUTPUT_DIR), help="输出目录")
    run.add_argument("--jobs", type=int, default=None, help="并行试验数，默认 MASTERPRINT_JOBS")
    run.add_argument("--trace", action="store_true", help="写出每代 CMA-ES 轨迹")
    run.add_argument("--save-dictionaries", action="store_true", help="保存每个字典为 JSON")

    report = sub.add_parser("report", help="把 report.csv 渲染为表格")
    report.add_argument("--in", dest="input", required=True, help="report.csv 路径")
    return parser


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse 用 2 表示用法错误，--help 为 0
        return int(e.code or 0)

    setup_logger("src", logging.DEBUG if (args.verbose or settings.DEBUG) else logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, UsageError, ReportError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_USAGE
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except MasterPrintError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
