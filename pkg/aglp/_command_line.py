from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import yaml
from rich.console import Console
from rich.markdown import Markdown
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table
from rich.text import Text

from aglp._argparse import AglpArgParser
from aglp._checkpoint import STATE_FILE, load_state, save_state
from aglp._config import (
    PRESETS,
    ExperimentSpec,
    TrainerConfig,
    apply_preset,
    load_spec,
    override,
    render_spec,
    to_dict,
)
from aglp._data import SPLITS, SsdaDataset, load_dataset, save_dataset
from aglp._errors import ConfigurationError, DimensionError, ParsingError
from aglp._files import append_csv, truncate_csv, write_csv
from aglp._model import AglpModel, load_checkpoint, save_checkpoint
from aglp._report import (
    SEPARATOR,
    SUMMARY_HEADER,
    RunOutcome,
    evaluation_rows,
    evaluation_table,
    loss_report_text,
    summarize,
    summary_table,
)
from aglp._trainer import (
    EvaluationRecord,
    LossReport,
    evaluate,
    evaluation_record,
    run as train,
    target_split,
)

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"
SUMMARY_FILE = "summary.csv"
RUNS_FILE = "runs.csv"
TRAIN_LOG = "train_log.csv"
EVAL_LOG = "eval_log.csv"
EVALUATION_FILE = "evaluation.csv"
CHECKPOINT_DIR = "checkpoint"
FINAL_DIR = "final"
DATASET_DIR = "dataset"
HELP_FILE = Path(__file__).parent / "aglp_commands.md"

RUNS_HEADER = ("configuration", "seed", "steps", "target_accuracy", "source_accuracy")


def _scalar(raw: str):
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as error:
        raise ParsingError(f"cannot parse value {raw!r}: {error}") from error
    if isinstance(value, str):
        # YAML reads "1e-3" as a string
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _experiment_arguments(parser: AglpArgParser) -> AglpArgParser:
    parser.add_argument("--config", type=Path)
    parser.add_argument("--seed", type=int)
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE"
    )
    return parser


def _training_arguments(parser: AglpArgParser) -> AglpArgParser:
    _experiment_arguments(parser)
    parser.add_argument("--out", dest="out_dir", type=Path)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--repeat", type=int)
    parser.add_argument("--dataset", type=Path)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--resume", action="store_true")
    return parser


def load_experiment(parsed) -> ExperimentSpec:
    """Config file (or defaults), then ``--set`` pairs, then the dedicated flags."""
    spec = load_spec(parsed.config) if parsed.config else ExperimentSpec()
    for item in parsed.overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ParsingError(f"--set expects KEY=VALUE, got {item!r}")
        spec = override(spec, key.strip(), _scalar(raw))

    if getattr(parsed, "out_dir", None) is not None:
        spec = replace(spec, out_dir=str(parsed.out_dir))
    if parsed.seed is not None:
        spec = override(spec, "dataset.seed", parsed.seed)
        spec = override(spec, "trainer.seed", parsed.seed)
    if getattr(parsed, "steps", None) is not None:
        spec = override(spec, "trainer.steps", parsed.steps)
    if getattr(parsed, "repeat", None) is not None:
        spec = override(spec, "repeat", parsed.repeat)
    spec.validate()
    return spec


@dataclass(frozen=True)
class RunJob:
    """One seeded training run; ``index`` picks the dataset and trainer seed offsets."""

    configuration: str
    index: int
    spec: ExperimentSpec
    trainer: TrainerConfig
    run_dir: str
    dataset_dir: str | None = None
    resume: bool = False


def build_jobs(
    spec: ExperimentSpec,
    presets: list[str] | None,
    dataset_dir: Path | None = None,
    resume: bool = False,
) -> list[RunJob]:
    if presets:
        configurations = [(name, apply_preset(spec.trainer, name)) for name in presets]
    else:
        configurations = [("default", spec.trainer)]
    jobs = []
    for name, trainer in configurations:
        for index in range(spec.repeat):
            seeded = replace(trainer, seed=trainer.seed + index)
            jobs.append(
                RunJob(
                    configuration=name,
                    index=index,
                    spec=spec,
                    trainer=seeded,
                    run_dir=str(Path(spec.out_dir) / name / f"seed-{seeded.seed}"),
                    dataset_dir=str(dataset_dir) if dataset_dir else None,
                    resume=resume,
                )
            )
    return jobs


def job_dataset(job: RunJob) -> SsdaDataset:
    if job.dataset_dir:
        return load_dataset(Path(job.dataset_dir))
    params = job.spec.dataset
    return replace(params, seed=params.seed + job.index).build()


def train_one(job: RunJob, on_step: Callable[[LossReport], None] | None = None) -> RunOutcome:
    """Train one run into its own directory, resuming from its checkpoint when asked."""
    run_dir = Path(job.run_dir)
    checkpoint = run_dir / CHECKPOINT_DIR
    dataset = job_dataset(job)

    state = None
    if job.resume and (checkpoint / STATE_FILE).is_file():
        state = load_state(checkpoint, job.trainer)
        resumed = state.step
        truncate_csv(run_dir / TRAIN_LOG, lambda row: int(row[0]) < resumed)
        truncate_csv(run_dir / EVAL_LOG, lambda row: int(row[0]) <= resumed)
        logger.info("resuming %s from step %d", run_dir, resumed)
    else:
        for name in (TRAIN_LOG, EVAL_LOG):
            (run_dir / name).unlink(missing_ok=True)

    pending_train: list[list] = []
    pending_eval: list[list] = []

    def flush() -> None:
        append_csv(run_dir / TRAIN_LOG, LossReport.HEADER, pending_train)
        append_csv(run_dir / EVAL_LOG, EvaluationRecord.HEADER, pending_eval)
        pending_train.clear()
        pending_eval.clear()

    def callback(state, report: LossReport, record: EvaluationRecord | None) -> None:
        pending_train.append(report.as_row())
        if record is not None:
            pending_eval.append(record.as_row())
        if state.step % job.trainer.checkpoint_every == 0 or state.step == job.trainer.steps:
            flush()
            save_state(state, checkpoint)
        if on_step is not None:
            on_step(report)

    result = train(job.trainer, dataset, job.spec.model, state=state, callback=callback)
    flush()

    model = result.state.model
    save_checkpoint(model, run_dir / FINAL_DIR)
    target_x, target_y = target_split(dataset)
    header, rows = evaluation_rows(
        evaluate(model, target_x, target_y, job.trainer.eval_batch_size)
    )
    write_csv(run_dir / EVALUATION_FILE, header, rows)

    final = result.final or evaluation_record(result.state, dataset)
    return RunOutcome(
        configuration=job.configuration,
        seed=job.trainer.seed,
        steps=result.state.step,
        target_accuracy=final.target_accuracy,
        source_accuracy=final.source_accuracy,
    )


def execute(console: Console, jobs: list[RunJob], workers: int = 1) -> list[RunOutcome]:
    """Run jobs in order, or across a process pool; outcomes keep the job order."""
    if workers < 1:
        raise ConfigurationError(f"--jobs must be positive, got {workers}")
    if workers > 1:
        logger.info("running %d jobs on %d workers", len(jobs), workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(train_one, jobs))

    outcomes = []
    with Progress(
        TextColumn("[b]{task.fields[run]}"),
        BarColumn(),
        TextColumn("{task.description}"),
        TimeElapsedColumn(),
        console=console,
    ) as progress:
        for job in jobs:
            task = progress.add_task(
                "",
                total=job.trainer.steps,
                run=f"{job.configuration}/seed-{job.trainer.seed}",
            )

            def on_step(report: LossReport, task=task) -> None:
                progress.update(
                    task,
                    completed=report.step + 1,
                    description=loss_report_text(report).markup,
                )

            outcomes.append(train_one(job, on_step))
    return outcomes


def write_summary(spec: ExperimentSpec, outcomes: list[RunOutcome]):
    out_dir = Path(spec.out_dir)
    write_csv(
        out_dir / RUNS_FILE,
        RUNS_HEADER,
        [
            [o.configuration, o.seed, o.steps, o.target_accuracy, o.source_accuracy]
            for o in outcomes
        ],
    )
    rows = summarize(outcomes)
    write_csv(out_dir / SUMMARY_FILE, SUMMARY_HEADER, [row.as_row() for row in rows])
    return rows


def _launch(
    console: Console, parsed, spec: ExperimentSpec, presets: list[str] | None
) -> int:
    out_dir = Path(spec.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / CONFIG_FILE).write_text(render_spec(spec), encoding="utf-8")
    except OSError as error:
        raise ConfigurationError(f"cannot write to {out_dir}: {error}") from error

    jobs = build_jobs(spec, presets, parsed.dataset, parsed.resume)
    outcomes = execute(console, jobs, parsed.jobs)
    rows = write_summary(spec, outcomes)
    console.print(summary_table(rows))
    console.print(f"[dim]summary written to[/] {out_dir / SUMMARY_FILE}")
    return 0


def _check_compatible(model: AglpModel, dataset: SsdaDataset) -> None:
    if model.input_dim != dataset.dim or model.num_classes != dataset.num_classes:
        raise DimensionError(
            f"checkpoint expects dim={model.input_dim}, K={model.num_classes}; "
            f"dataset has dim={dataset.dim}, K={dataset.num_classes}"
        )


def _resolve_dataset(parsed) -> SsdaDataset:
    if parsed.dataset is not None:
        return load_dataset(parsed.dataset)
    return load_experiment(parsed).dataset.build()


@dataclass
class Command:
    command: str = ""
    syntax: str = ""
    description: str = ""

    @classmethod
    def load_command(cls, command_string: str) -> "Command | None":
        return _COMMANDS.get(command_string)

    @classmethod
    def is_valid_command(cls, command: str) -> bool:
        return command in _COMMANDS

    @property
    def arg_parser(self) -> AglpArgParser:
        return AglpArgParser(prog=f"aglp {self.command}")

    def reference(self) -> Text:
        return Text.assemble(
            Text.from_markup(self.syntax),
            SEPARATOR,
            Text.from_markup(self.description),
        )

    def run(self, console: Console, args: list[str]) -> int:
        raise NotImplementedError


@dataclass
class Generate(Command):
    command: str = "generate"
    syntax: str = "[b]generate[/] [--config [i]FILE[/]] [--out [i]DIR[/]] [--seed [i]N[/]]"
    description: str = "Write the synthetic dataset and its manifest to [i]DIR[/]/dataset."

    @property
    def arg_parser(self) -> AglpArgParser:
        parser = _experiment_arguments(super().arg_parser)
        parser.add_argument("--out", dest="out_dir", type=Path)
        return parser

    def run(self, console: Console, args: list[str]) -> int:
        spec = load_experiment(self.arg_parser.parse_args(args))
        directory = Path(spec.out_dir) / DATASET_DIR
        dataset = spec.dataset.build()
        try:
            save_dataset(dataset, directory, to_dict(spec.dataset))
        except OSError as error:
            raise ConfigurationError(f"cannot write dataset to {directory}: {error}") from error

        table = Table(title=str(directory), title_style="b")
        table.add_column("split", style="b")
        table.add_column("examples", justify="right")
        for name, count in dataset.counts().items():
            table.add_row(name, str(count))
        console.print(table)
        return 0


@dataclass
class Train(Command):
    command: str = "train"
    syntax: str = (
        "[b]train[/] [--config [i]FILE[/]] [--preset [i]NAME[/]] [--out [i]DIR[/]] "
        "[--seed [i]N[/]] [--steps [i]N[/]] [--repeat [i]N[/]] [--resume]"
    )
    description: str = "Train [i]repeat[/] seeded runs of one configuration and summarize them."

    @property
    def arg_parser(self) -> AglpArgParser:
        parser = _training_arguments(super().arg_parser)
        parser.add_argument("--preset", choices=sorted(PRESETS))
        return parser

    def run(self, console: Console, args: list[str]) -> int:
        parsed = self.arg_parser.parse_args(args)
        spec = load_experiment(parsed)
        return _launch(console, parsed, spec, [parsed.preset] if parsed.preset else None)


@dataclass
class Sweep(Command):
    command: str = "sweep"
    syntax: str = "[b]sweep[/] [--presets [i]A,B,...[/]] [--jobs [i]N[/]] [i]TRAIN OPTIONS[/]"
    description: str = "Train every preset of the ablation grid and write one summary row each."

    @property
    def arg_parser(self) -> AglpArgParser:
        parser = _training_arguments(super().arg_parser)
        parser.add_argument("--presets")
        return parser

    def run(self, console: Console, args: list[str]) -> int:
        parsed = self.arg_parser.parse_args(args)
        if parsed.presets:
            names = [name.strip() for name in parsed.presets.split(",") if name.strip()]
            parsed.overrides = [*parsed.overrides, f"presets=[{','.join(names)}]"]
        spec = load_experiment(parsed)
        return _launch(console, parsed, spec, list(spec.presets))


@dataclass
class Evaluate(Command):
    command: str = "evaluate"
    syntax: str = "[b]evaluate[/] [i]CHECKPOINT[/] [--dataset [i]DIR[/]] [--split [i]NAME[/]]"
    description: str = "Accuracy, per-class accuracy and confusion matrix of a checkpoint."

    @property
    def arg_parser(self) -> AglpArgParser:
        parser = _experiment_arguments(super().arg_parser)
        parser.add_argument("checkpoint", type=Path)
        parser.add_argument("--dataset", type=Path)
        parser.add_argument("--split", choices=SPLITS, default="test")
        parser.add_argument("--out", dest="output", type=Path)
        parser.add_argument("--batch-size", type=int, default=256)
        return parser

    def run(self, console: Console, args: list[str]) -> int:
        parsed = self.arg_parser.parse_args(args)
        model = load_checkpoint(parsed.checkpoint)
        dataset = _resolve_dataset(parsed)
        _check_compatible(model, dataset)
        x, labels = dataset.split(parsed.split)
        report = evaluate(model, x, labels, parsed.batch_size)
        console.print(evaluation_table(report))
        if parsed.output is not None:
            header, rows = evaluation_rows(report)
            write_csv(parsed.output, header, rows)
        return 0


@dataclass
class DumpFeatures(Command):
    command: str = "dump-features"
    syntax: str = "[b]dump-features[/] [i]CHECKPOINT[/] --out [i]FILE[/] [--split [i]NAME[/]]"
    description: str = "Write one row of fused features per example for external plotting."

    @property
    def arg_parser(self) -> AglpArgParser:
        parser = _experiment_arguments(super().arg_parser)
        parser.add_argument("checkpoint", type=Path)
        parser.add_argument("--out", dest="output", type=Path, required=True)
        parser.add_argument("--dataset", type=Path)
        parser.add_argument("--split", choices=("all", *SPLITS), default="all")
        parser.add_argument("--batch-size", type=int, default=256)
        return parser

    def run(self, console: Console, args: list[str]) -> int:
        parsed = self.arg_parser.parse_args(args)
        model = load_checkpoint(parsed.checkpoint)
        dataset = _resolve_dataset(parsed)
        _check_compatible(model, dataset)

        splits = SPLITS if parsed.split == "all" else (parsed.split,)
        rows = dump_rows(model, dataset, splits, parsed.batch_size)
        header = ["id", "domain", "split", "label", *(f"f{i}" for i in range(model.fused_dim))]
        write_csv(parsed.output, header, rows)
        console.print(f"[b]{len(rows)}[/] rows [dim]written to[/] {parsed.output}")
        return 0


def dump_rows(
    model: AglpModel, dataset: SsdaDataset, splits: tuple[str, ...], batch_size: int = 256
) -> list[list]:
    """id, domain tag, split, label (-1 for unlabeled), then the fused feature vector."""
    rows = []
    for split in splits:
        x, labels = dataset.split(split)
        fused, _ = model.embed(x, batch_size)
        domain = "source" if split == "source" else "target"
        for features, label in zip(fused, labels):
            shown = -1 if split == "unlabeled" else int(label)
            rows.append([len(rows), domain, split, shown, *features.tolist()])
    return rows


@dataclass
class Help(Command):
    command: str = "help"
    syntax: str = "[b]help[/]"
    description: str = "Show this reference."

    def run(self, console: Console, args: list[str]) -> int:
        console.print(Markdown(HELP_FILE.read_text(encoding="utf-8")))
        for command in _COMMANDS.values():
            console.print(command.reference())
        return 0


_COMMANDS: dict[str, Command] = {
    "generate": Generate(),
    "train": Train(),
    "sweep": Sweep(),
    "evaluate": Evaluate(),
    "dump-features": DumpFeatures(),
    "help": Help(),
}
