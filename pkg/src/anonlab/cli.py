"""Command-line pipeline: corpus generation, stage-1 training, probes,
synthesis training, MI analysis, reports, and gradient checks.

Artifacts land in a fixed layout under the configured output directory
(corpus/, ckpt/, metrics/, reports/), so the report stage can discover
sweep results without a registry. Every subcommand writes the fully
resolved config next to its artifacts and is idempotent: identical
config + seed re-runs overwrite with byte-identical files.

Set ANONLAB_THREADS to pin the BLAS thread count before numpy loads
(reproducibility across machines wants 1).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_env() -> None:
    n = os.environ.get("ANONLAB_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, n)


class CliError(RuntimeError):
    """User-facing failure with a named cause; maps to a nonzero exit."""


def run_name(grl) -> str:
    return f"adv_t{grl.tap_layer}_a{grl.alpha:g}_l{grl.lam:g}"


def _echo_config(cfg, out_dir: Path, subcommand: str) -> None:
    from .config import dump_config

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"config-{subcommand}.txt").write_text(dump_config(cfg))


def _load_corpus(cfg):
    from .synthdata import CorpusError, load_corpus

    corpus_dir = cfg.out_dir() / "corpus"
    try:
        return load_corpus(corpus_dir)
    except CorpusError as e:
        raise CliError(f"missing corpus: {e}; run `anonlab gen-data` first") from e


def _stage1_paths(cfg, name: str) -> tuple[Path, Path]:
    out = cfg.out_dir()
    return out / "ckpt" / f"{name}.ckpt", out / "metrics" / f"{name}.csv"


def _write_ter_row(cfg, name: str, grl, encoder, head, corpus) -> dict:
    from .evaluation import TER_COLUMNS, dataset_token_error_rate, write_csv

    row = {
        "model": name,
        "grl": "-" if grl is None else f"CE{grl.tap_layer}",
        "alpha/lambda": "-" if grl is None else f"{grl.alpha:g}/{grl.lam:g}",
    }
    for split in ("train", "dev", "test_adv"):
        ter = dataset_token_error_rate(encoder, head, corpus, split, cfg.features)
        row[f"ter_{split}"] = f"{ter:.4f}"
    write_csv([row], TER_COLUMNS, cfg.out_dir() / "reports" / "ter" / f"{name}.csv")
    return row


def cmd_gen_data(cfg) -> int:
    from .synthdata import generate_corpus, save_corpus

    c = cfg.corpus
    corpus = generate_corpus(
        c.n_speakers,
        c.utts_per_speaker,
        c.vocab_size,
        c.seed,
        tokens_per_utt=c.tokens_per_utt,
        test_adv_fraction=c.test_adv_fraction,
        dev_fraction=c.dev_fraction,
    )
    save_corpus(corpus, cfg.out_dir() / "corpus")
    print(
        f"corpus: {len(corpus.utterances)} utterances, {c.n_speakers} speakers, "
        f"splits {{{', '.join(f'{k}: {len(v)}' for k, v in corpus.splits.items())}}}"
    )
    return 0


def _train_stage1(cfg, grl) -> int:
    from .training import DivergenceError, train_stage1

    corpus = _load_corpus(cfg)
    name = "baseline" if grl is None else run_name(grl)
    ckpt, metrics = _stage1_paths(cfg, name)
    try:
        model, trace = train_stage1(
            corpus, cfg.encoder, grl, cfg.train, cfg.features, ckpt_path=ckpt, metrics_path=metrics
        )
    except DivergenceError as e:
        raise CliError(f"training run {name!r} aborted: {e}") from e
    row = _write_ter_row(cfg, name, grl, model.encoder, model.head, corpus)
    print(f"{name}: final l_y {trace.column('l_y')[-1]:.4f}; TER dev {row['ter_dev']} "
          f"test_adv {row['ter_test_adv']}; checkpoint {ckpt}")
    return 0


def cmd_train_baseline(cfg) -> int:
    return _train_stage1(cfg, None)


def cmd_train_adv(cfg) -> int:
    return _train_stage1(cfg, cfg.grl)


def cmd_probe(cfg, model: str) -> int:
    from .evaluation import PROBE_COLUMNS, write_csv
    from .models import CheckpointError
    from .training import train_probe

    corpus = _load_corpus(cfg)
    name = run_name(cfg.grl) if model == "adv" else model
    ckpt, _ = _stage1_paths(cfg, name)
    if not ckpt.exists():
        raise CliError(f"missing checkpoint {ckpt}; train the {name!r} model first")
    grl_label = "-" if name == "baseline" else f"CE{cfg.grl.tap_layer}"
    al_label = "-" if name == "baseline" else f"{cfg.grl.alpha:g}/{cfg.grl.lam:g}"
    for tap in cfg.probe.tap_list():
        try:
            result = train_probe(ckpt, tap, corpus, cfg.probe_config(), cfg.features)
        except (CheckpointError, ValueError) as e:
            raise CliError(f"probe on {name!r} tap {tap} failed: {e}") from e
        row = {
            "model": name,
            "grl": grl_label,
            "alpha/lambda": al_label,
            "ae_tap": f"CE{tap}",
            "spk_acc": f"{result.accuracy:.4f}",
        }
        write_csv([row], PROBE_COLUMNS, cfg.out_dir() / "reports" / "probe" / f"{name}_tap{tap}.csv")
        print(f"probe {name} tap {tap}: unweighted accuracy {result.accuracy:.4f} "
              f"({result.n_train} train / {result.n_test} test utterances)")
    return 0


def cmd_train_synth(cfg, model: str) -> int:
    import csv

    from .models import save_checkpoint
    from .training import DivergenceError, train_synth

    corpus = _load_corpus(cfg)
    name = run_name(cfg.grl) if model == "adv" else model
    ckpt, _ = _stage1_paths(cfg, name)
    if not ckpt.exists():
        raise CliError(f"missing checkpoint {ckpt}; train the {name!r} model first")
    tap = cfg.synth.tap
    try:
        result = train_synth(ckpt, tap, corpus, cfg.synth_train_config(), cfg.features)
    except DivergenceError as e:
        raise CliError(f"synthesis training on {name!r} aborted: {e}") from e

    out = cfg.out_dir()
    synth_name = f"synth_{name}_tap{tap}"
    save_checkpoint(
        out / "ckpt" / f"{synth_name}.ckpt",
        {"kind": "synth", "stage1": name, "tap": tap, "seed": cfg.synth.seed},
        result.generator.params,
    )
    metrics = out / "metrics" / f"{synth_name}.csv"
    metrics.parent.mkdir(parents=True, exist_ok=True)
    with open(metrics, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "l_g", "l_d"])
        for i, (lg, ld) in enumerate(zip(result.gen_loss, result.dis_loss), start=1):
            w.writerow([i, f"{lg:.6f}", f"{ld:.6f}"])
    with open(out / "metrics" / f"{synth_name}_holdout.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mel_l1"])
        for step, val in result.holdout_mel:
            w.writerow([step, f"{val:.6f}"])
    first, last = result.holdout_mel[1][1], result.holdout_mel[-1][1]
    print(f"{synth_name}: held-out mel L1 {first:.4f} -> {last:.4f} "
          f"({(1 - last / first) * 100:.1f}% drop); checkpoint written")
    return 0


def _resynthesize(cfg, corpus, name: str, tap: int):
    from .autodiff import Tensor
    from .models import SynthGenerator, load_checkpoint, load_params_into
    from .training import extract_tap_embeddings, load_stage1_checkpoint

    stage1_ckpt, _ = _stage1_paths(cfg, name)
    synth_ckpt = cfg.out_dir() / "ckpt" / f"synth_{name}_tap{tap}.ckpt"
    if not synth_ckpt.exists():
        raise CliError(f"missing generator checkpoint {synth_ckpt}; run `anonlab train-synth` first")
    _, encoder, _ = load_stage1_checkpoint(stage1_ckpt)
    gen = SynthGenerator(encoder.cfg.model_dim, seed=0)
    manifest, arrays = load_checkpoint(synth_ckpt)
    load_params_into(gen.params, arrays)
    utts = corpus.split_utterances(cfg.mi.split)
    emb = extract_tap_embeddings(encoder, utts, tap, cfg.features)
    pairs = []
    for lo in range(0, len(utts), 16):
        fake = gen.forward(Tensor(emb[lo : lo + 16])).data
        for u, wave in zip(utts[lo : lo + 16], fake):
            pairs.append((u.utt_id, u.waveform, wave))
    return pairs


def cmd_eval_mi(cfg) -> int:
    from .evaluation import MiConfig, mi_difference_report

    corpus = _load_corpus(cfg)
    tap = cfg.mi.tap
    base_pairs = _resynthesize(cfg, corpus, "baseline", tap)
    anon_pairs = _resynthesize(cfg, corpus, run_name(cfg.grl), tap)
    report = mi_difference_report(base_pairs, anon_pairs, MiConfig(cfg.mi.n_bins, cfg.mi.hist_bins))
    out = cfg.out_dir() / "reports"
    report.curves_csv(out / "mi_curves.csv")
    report.histogram_csv(out / "mi_histogram.csv")
    (out / "mi_summary.txt").write_text(
        f"utterances: {len(report.utt_ids)}\n"
        f"mean MI (baseline resynthesis): {report.mi_baseline.mean():.4f} bits\n"
        f"mean MI (anonymized resynthesis): {report.mi_anon.mean():.4f} bits\n"
        f"mean difference: {report.mean_difference:.4f} bits\n"
    )
    print(f"MI difference over {len(report.utt_ids)} utterances: "
          f"mean {report.mean_difference:.4f} bits (baseline {report.mi_baseline.mean():.4f}, "
          f"anonymized {report.mi_anon.mean():.4f})")
    return 0


def cmd_report(cfg) -> int:
    import csv as _csv

    from .evaluation import make_report

    out = cfg.out_dir()

    def read_rows(folder: Path) -> list[dict]:
        rows = []
        if folder.is_dir():
            for path in sorted(folder.glob("*.csv")):
                with open(path, newline="") as fh:
                    rows.extend(_csv.DictReader(fh))
        return rows

    ter_rows = read_rows(out / "reports" / "ter")
    probe_rows = read_rows(out / "reports" / "probe")
    if not ter_rows and not probe_rows:
        raise CliError(f"nothing to report under {out / 'reports'}; train and probe first")
    ter_text, probe_text = make_report(ter_rows, probe_rows, out / "reports")
    for text in (ter_text, probe_text):
        if text:
            print(text)
    return 0


def cmd_grad_check(cfg, cases: int) -> int:
    from .verification import run_all_checks

    report = run_all_checks(cases_per_primitive=cases)
    failed = [line for line in report.lines if not line.passed]
    for line in report.lines:
        print(line.render())
    if failed:
        print(f"{len(failed)} check(s) FAILED")
        return 1
    print("all gradient and oracle checks passed")
    return 0


def cmd_sweep(cfg) -> int:
    import dataclasses

    from .training import DivergenceError, GrlConfig, train_stage1

    corpus = _load_corpus(cfg)
    failures = []
    for tap, alpha, lam in cfg.sweep.grid():
        grl = GrlConfig(tap, alpha, lam)
        name = run_name(grl)
        ckpt, metrics = _stage1_paths(cfg, name)
        try:
            model, _ = train_stage1(
                corpus, cfg.encoder, grl, cfg.train, cfg.features, ckpt_path=ckpt, metrics_path=metrics
            )
        except DivergenceError as e:
            failures.append((name, str(e)))
            print(f"{name}: DIVERGED ({e})")
            continue
        row = _write_ter_row(cfg, name, grl, model.encoder, model.head, corpus)
        print(f"{name}: TER dev {row['ter_dev']} test_adv {row['ter_test_adv']}")
    cmd_report(cfg)
    if failures:
        print(f"{len(failures)} grid point(s) diverged: {[n for n, _ in failures]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anonlab",
        description="Desk-scale speaker-adversarial training and evaluation pipeline.",
    )
    parser.add_argument("--config", help="flat key=value config file", default=None)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sub.add_parser("gen-data", help="generate and persist the synthetic corpus")
    sub.add_parser("train-baseline", help="train the no-reversal reference model")
    sub.add_parser("train-adv", help="train with the configured gradient reversal")
    p = sub.add_parser("probe", help="train fresh speaker probes on frozen tap embeddings")
    p.add_argument("--model", default="adv", help="'baseline', 'adv', or a run name")
    p = sub.add_parser("train-synth", help="train the embedding-to-waveform generator")
    p.add_argument("--model", default="baseline", help="'baseline', 'adv', or a run name")
    sub.add_parser("eval-mi", help="mutual-information difference report")
    sub.add_parser("report", help="aggregate result grids from prior runs")
    p = sub.add_parser("grad-check", help="finite-difference and oracle suites")
    p.add_argument("--cases", type=int, default=100, help="FD cases per primitive")
    sub.add_parser("sweep", help="grid of reversal placements and scales")

    for name, sp in sub.choices.items():
        sp.add_argument(
            "overrides",
            nargs="*",
            metavar="section.key=value",
            help="config overrides",
        )
    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)

    from .config import ConfigError, load_config

    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    _echo_config(cfg, cfg.out_dir(), args.subcommand)
    handlers = {
        "gen-data": lambda: cmd_gen_data(cfg),
        "train-baseline": lambda: cmd_train_baseline(cfg),
        "train-adv": lambda: cmd_train_adv(cfg),
        "probe": lambda: cmd_probe(cfg, args.model),
        "train-synth": lambda: cmd_train_synth(cfg, args.model),
        "eval-mi": lambda: cmd_eval_mi(cfg),
        "report": lambda: cmd_report(cfg),
        "grad-check": lambda: cmd_grad_check(cfg, args.cases),
        "sweep": lambda: cmd_sweep(cfg),
    }
    try:
        return handlers[args.subcommand]()
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
