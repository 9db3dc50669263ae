"""Command-line entry points: ``python -m copyforge <command>``."""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click

from copyforge.config import PROFILES, CopyMode, RunConfig, load_run_config
from copyforge.d2t_synth import (
    RARE_NAME_MIN_FREQ,
    d2t_evaluate,
    games_to_pairs,
    generate_dataset,
    generate_summarization_corpus,
    load_generations,
    read_games_jsonl,
    split_dataset,
    write_games_jsonl,
    write_pairs_jsonl,
)
from copyforge.exceptions import CopyForgeError
from copyforge.logger import logger
from copyforge.metrics import evaluate_generations
from copyforge.pipeline import consolidate_runs, generate_from_run, grad_check_toy, train_from_config, vocab_sweep
from copyforge.utils import write_report

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2
SPLITS = ("train", "valid", "test")


def _parse_sets(values: Sequence[str]) -> List[Tuple[str, str]]:
    pairs = []
    for item in values:
        if "=" not in item:
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--set")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _resolve(config: Optional[Path], sets: Sequence[str], **flags: Optional[str]) -> RunConfig:
    """Config file, then ``--set`` pairs, then dedicated flags (later wins)."""
    overrides = _parse_sets(sets)
    overrides += [(key, value) for key, value in flags.items() if value is not None]
    return load_run_config(config, overrides)


def _echo_config(out_dir: Path, origin: Optional[Path] = None, overrides: Sequence[Tuple[str, str]] = ()) -> None:
    """``run.cfg``/``run.json`` next to a command's outputs; reuses the config beside ``origin`` when present."""
    source = origin / "run.cfg" if origin is not None else None
    load_run_config(source if source is not None and source.exists() else None, list(overrides)).write(out_dir)


config_option = click.option(
    "--config", "config", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None
)
set_option = click.option("--set", "sets", multiple=True, help="KEY=VALUE override, repeatable")
threads_option = click.option("--threads", type=click.IntRange(min=1), default=None)


@click.group()
def main() -> None:
    """copyforge: pointer-generator training, decoding and evaluation."""


@main.command("train")
@config_option
@set_option
@click.option("--mode", type=click.Choice([m.value for m in CopyMode]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(file_okay=False), default=None, help="checkpoint directory")
@click.option("--resume", is_flag=True, default=False)
@threads_option
def train_cmd(
    config: Optional[Path],
    sets: Tuple[str, ...],
    mode: Optional[str],
    seed: Optional[int],
    out: Optional[str],
    resume: bool,
    threads: Optional[int],
) -> int:
    run_config = _resolve(
        config, sets, mode=mode, seed=None if seed is None else str(seed), checkpoint_dir=out
    )
    result, vocab, resolved = train_from_config(run_config, resume=resume, threads=threads)
    click.echo(
        f"trained {result.steps} steps (best val {result.best_val}) -> {resolved.train.checkpoint_dir}"
    )
    return EXIT_OK


@main.command("generate")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--input", "jsonl_in", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--output", "jsonl_out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--beam", type=click.IntRange(min=1), default=None)
@click.option("--max-len", type=click.IntRange(min=1), default=None)
@click.option("--block-ngram", type=click.IntRange(min=0), default=None)
@click.option("--length-norm/--no-length-norm", default=None)
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default=None)
@click.option("--which", type=click.Choice(["best", "last"]), default="best")
@threads_option
def generate_cmd(
    run_dir: Path,
    jsonl_in: Path,
    jsonl_out: Path,
    beam: Optional[int],
    max_len: Optional[int],
    block_ngram: Optional[int],
    length_norm: Optional[bool],
    profile: Optional[str],
    which: str,
    threads: Optional[int],
) -> int:
    overrides: Dict[str, str] = {}
    if profile is not None:
        overrides.update({k: str(v).lower() for k, v in PROFILES[profile].items()})
    for key, value in (
        ("beam_size", beam),
        ("max_len", max_len),
        ("block_ngram", block_ngram),
        ("length_norm", length_norm),
    ):
        if value is not None:
            overrides[key] = str(value).lower()
    count = generate_from_run(run_dir, jsonl_in, jsonl_out, overrides, which, threads)
    click.echo(f"wrote {count} generations to {jsonl_out}")
    return EXIT_OK


@main.command("evaluate")
@click.option("--input", "jsonl_in", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--output", "report_csv", type=click.Path(dir_okay=False, path_type=Path), default=None)
def evaluate_cmd(jsonl_in: Path, report_csv: Optional[Path]) -> int:
    target = report_csv or jsonl_in.parent / "metrics.csv"
    report = evaluate_generations(jsonl_in, target)
    _echo_config(target.parent, jsonl_in.parent)
    click.echo(
        f"n={report.n} R1={report.rouge1_f:.2f} R2={report.rouge2_f:.2f} RL={report.rougeL_f:.2f} "
        f"CP={report.copy_precision:.2f} NN2={report.nn2:.2f} p_copy={report.avg_p_copy:.3f} -> {target}"
    )
    return EXIT_OK


@main.command("d2t-gen")
@click.option("--seed", type=int, default=13)
@click.option("--games", type=click.IntRange(min=1), default=2000)
@click.option("--oov-frac", type=click.FloatRange(0.0, 1.0), default=0.1)
@click.option("--pool", type=click.IntRange(min=6), default=40)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--task", type=click.Choice(sorted(PROFILES)), default="data_to_text", help="synthetic corpus kind")
def d2t_gen_cmd(seed: int, games: int, oov_frac: float, pool: int, out_dir: Path, task: str) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    if task == "summarization":
        docs = generate_summarization_corpus(seed, games, oov_fraction=oov_frac, name_pool_size=pool)
        doc_splits = split_dataset(docs, seed)
        for name, pairs in zip(SPLITS, doc_splits):
            write_pairs_jsonl(pairs, out_dir / f"{name}.jsonl")
        sizes = [len(p) for p in doc_splits]
    else:
        dataset = generate_dataset(seed, games, name_pool_size=pool, oov_name_fraction=oov_frac)
        game_splits = split_dataset(dataset, seed)
        for name, part in zip(SPLITS, game_splits):
            write_games_jsonl(part, out_dir / f"{name}_games.jsonl")
            write_pairs_jsonl(games_to_pairs(part), out_dir / f"{name}.jsonl")
        sizes = [len(p) for p in game_splits]
    load_run_config(
        None,
        [
            ("profile", task),
            ("seed", str(seed)),
            ("min_freq", str(RARE_NAME_MIN_FREQ)),
            ("train_path", str(out_dir / "train.jsonl")),
            ("valid_path", str(out_dir / "valid.jsonl")),
            ("test_path", str(out_dir / "test.jsonl")),
        ],
    ).write(out_dir)
    click.echo(f"{games} {task} examples -> {out_dir} (" + "/".join(str(n) for n in sizes) + ")")
    return EXIT_OK


@main.command("d2t-eval")
@click.option("--generations", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--games", "games_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--output", "report_csv", type=click.Path(dir_okay=False, path_type=Path), default=None)
def d2t_eval_cmd(generations: Path, games_path: Path, report_csv: Optional[Path]) -> int:
    report = d2t_evaluate(load_generations(generations), read_games_jsonl(games_path))
    row = report.model_dump(exclude={"buckets"})
    row.update(
        {
            "copy_bucket_precision": report.buckets.copy_precision,
            "copy_bucket_share": report.buckets.copy_share,
            "gen_bucket_precision": report.buckets.gen_precision,
            "gen_bucket_share": report.buckets.gen_share,
        }
    )
    target = report_csv or generations.parent / "d2t.csv"
    write_report([row], target)
    _echo_config(target.parent, generations.parent)
    click.echo(
        f"RG {report.rg_precision:.2f}% #{report.rg_count:.2f} CS {report.cs_precision:.2f}/"
        f"{report.cs_recall:.2f} CO {report.co:.2f} -> {target}"
    )
    return EXIT_OK


@main.command("grad-check")
@click.option("--seed", type=int, default=0)
@click.option("--mode", "modes", type=click.Choice([m.value for m in CopyMode]), multiple=True)
@click.option("--eps", type=float, default=1e-5)
@click.option("--tol", type=float, default=1e-4)
@click.option("--coords", type=click.IntRange(min=1), default=200)
@click.option("--output", "report_csv", type=click.Path(dir_okay=False, path_type=Path), default=None)
def grad_check_cmd(
    seed: int, modes: Tuple[str, ...], eps: float, tol: float, coords: int, report_csv: Optional[Path]
) -> int:
    selected = [CopyMode(m) for m in modes] if modes else list(CopyMode)
    rows = []
    for mode in selected:
        report = grad_check_toy(seed, mode, eps=eps, tol=tol, max_coords=coords)
        rows.append({"mode": mode.value, **report.model_dump()})
        click.echo(
            f"{mode.value}: {'PASS' if report.passed else 'FAIL'} "
            f"max_rel_error={report.max_rel_error:.3e} n={report.n_checked}"
        )
    if report_csv is not None:
        write_report(rows, report_csv)
        _echo_config(report_csv.parent, overrides=[("seed", str(seed))])
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_ERROR


@main.command("report")
@click.option("--runs", "runs_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--output", "report_csv", type=click.Path(dir_okay=False, path_type=Path), default=None)
def report_cmd(runs_dir: Path, report_csv: Optional[Path]) -> int:
    target = report_csv or runs_dir / "report.csv"
    rows = consolidate_runs(runs_dir, target)
    _echo_config(target.parent)
    click.echo(f"{len(rows)} runs -> {target}")
    return EXIT_OK


@main.command("vocab-sweep")
@config_option
@set_option
@click.option("--sizes", required=True, help="comma-separated vocabulary sizes")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@threads_option
def vocab_sweep_cmd(
    config: Optional[Path], sets: Tuple[str, ...], sizes: str, out_dir: Path, threads: Optional[int]
) -> int:
    try:
        size_list = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter(f"not a list of integers: {sizes!r}", param_hint="--sizes")
    run_config = _resolve(config, sets, mode=CopyMode.FORCE_COPY_UNK.value)
    rows = vocab_sweep(run_config, size_list, out_dir, threads)
    run_config.write(out_dir)
    click.echo(f"{len(rows)} sweep rows -> {out_dir / 'sweep.csv'}")
    return EXIT_OK


@main.command("serve")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve_cmd(run_dir: Path, host: str, port: int) -> int:
    import uvicorn

    from copyforge.api import create_app

    uvicorn.run(create_app(run_dir), host=host, port=port)
    return EXIT_OK


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; 0 on success, 1 on contract/data errors, 2 on usage errors."""
    try:
        rv = main.main(args=list(argv) if argv is not None else None, prog_name="copyforge", standalone_mode=False)
    except click.UsageError as e:
        click.echo(f"Usage error: {e.format_message()}", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        click.echo(f"Error: {e.format_message()}", err=True)
        return EXIT_ERROR
    except click.Abort:
        return EXIT_ERROR
    except CopyForgeError as e:
        logger.error(f"{type(e).__name__}: {e.message} {e.details}")
        click.echo(f"Error: {e.message}", err=True)
        return EXIT_ERROR
    return rv if isinstance(rv, int) else EXIT_OK
