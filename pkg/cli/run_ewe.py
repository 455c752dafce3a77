"""
ewe command line
================
    python -m cli.run_ewe train --mode ewe --out victim.ewem
    python -m cli.run_ewe extract --victim victim.ewem --out stolen.ewem
    python -m cli.run_ewe verify --suspect stolen.ewem --wm victim.ewem --n 100
    python -m cli.run_ewe attack prune --model stolen.ewem --wm victim.ewem
    python -m cli.run_ewe analyze cka --model victim.ewem
    python -m cli.run_ewe sweep
    python -m cli.run_ewe toy
    python -m cli.run_ewe report runs/extraction_summary.csv

Every subcommand reads the defaults in watermark/ewe_params.yaml, then ``--config``,
then ``--set key=value`` items, and writes a YAML manifest next to its outputs.
Exit status: 0 on success, 2 on usage or configuration errors, 1 on any other failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from analysis.representations import (activation_frequency, frequency_similarity, layer_cka, pca_project,
                                      training_tradeoff, watermark_target_distance)
from analysis.sweep import sweep_tradeoff
from attacks.adversarial_walk import adversarial_walk
from attacks.anomaly import lof_evaluation
from attacks.disentangle import disentangle_extract, guess_count, guessed_watermarks
from attacks.neural_cleanse import neural_cleanse, trigger_success
from attacks.piracy import piracy_cycle
from attacks.pruning import fine_prune, prune
from attacks.reports import AttackReport
from cli.report import load_summaries, render, summarize
from cli.toy_demo import run_toy
from common.artifacts import Manifest, append_csv, save_scatter_plot
from common.config import RunConfig
from common.errors import ConfigError, ContractError, EweError, UnverifiableError
from extraction.extract import label_with_victim
from nn_models.container import load_model, load_model_with_watermark, load_watermark, save_model, save_watermark
from nn_models.models import activations, evaluate
from verification.ownership import (claim_ownership, conservative_false_rate, false_watermark_rate, queries_needed,
                                    watermark_success_rate)
from watermark.pipeline import (MODES, extract, extraction_queries, false_rate, load_task, model_spec, train_victim,
                                watermark_spec)

logger = logging.getLogger("ewe")

ATTACKS = ("prune", "fineprune", "disentangle", "piracy", "cleanse", "lof", "walk")
ANALYSES = ("activations", "cka", "pca")


class _Run:
    """Resolved config, output directory and manifest shared by the subcommand handlers."""

    def __init__(self, args, argv):
        self.args = args
        self.config = RunConfig.from_sources(args.config, args.set or ())
        self.out_dir = Path(args.out_dir)
        self.manifest = Manifest(args.command, argv, self.config.snapshot(), self.config.seed)
        self.manifest.add_input(args.config)

    def output(self, name):
        path = self.out_dir / name
        self.manifest.add_output(path)
        return path

    def claim_output(self, path):
        if path is not None:
            self.manifest.add_output(path)
        return path

    def finish(self):
        path = Path(self.args.manifest) if self.args.manifest else self.out_dir / f"{self.args.command}.manifest.yaml"
        return self.manifest.write(path)


def _load_watermark(run, explicit, fallback):
    if explicit:
        run.manifest.add_input(explicit)
        return load_watermark(explicit)
    _, wm = load_model_with_watermark(fallback)
    if wm is None:
        raise ContractError(f"{fallback} carries no watermark section; pass --wm")
    return wm


def _load(run, path):
    run.manifest.add_input(path)
    return load_model(path)


def _false_rate(run, wm, k):
    args = run.args
    if getattr(args, "p0", None) is not None:
        return float(args.p0)
    if getattr(args, "clean", None):
        return false_watermark_rate([_load(run, p) for p in args.clean], wm)
    return conservative_false_rate(k)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(run):
    args, cfg = run.args, run.config
    data = load_task(cfg)
    victim = train_victim(cfg, args.mode, data, metrics_path=run.output(f"train_{args.mode}_metrics.csv"))
    save_model(run.claim_output(args.out), victim.model, victim.wm)
    if args.wm_out and victim.wm is not None:
        save_watermark(run.claim_output(args.wm_out), victim.wm)
    if args.clean_out:
        save_model(run.claim_output(args.clean_out), victim.clean_model)
    row = {"mode": args.mode, "seed": cfg.seed, "test_acc": evaluate(victim.model, data.test),
           "clean_acc": evaluate(victim.clean_model, data.test), "wm_success": np.nan, "false_rate": np.nan}
    line = f"{args.mode} model: test accuracy {row['test_acc']:.4f} (clean reference {row['clean_acc']:.4f})"
    if victim.wm is not None:
        row["wm_success"] = watermark_success_rate(victim.model, victim.wm)
        row["false_rate"] = false_rate(cfg, data, victim.wm, victim.clean_model)
        line += f", watermark success {row['wm_success']:.4f}, false watermark rate {row['false_rate']:.4f}"
        append_csv(run.output(f"train_{args.mode}_tradeoff.csv"), training_tradeoff(victim.training.history))
    append_csv(run.output("train_summary.csv"), [row])
    print(line)
    return 0


def cmd_extract(run):
    args, cfg = run.args, run.config
    victim, wm = load_model_with_watermark(args.victim)
    run.manifest.add_input(args.victim)
    data = load_task(cfg)
    stolen = extract(cfg, victim, data, metrics_path=run.output("extract_metrics.csv"))
    save_model(run.claim_output(args.out), stolen.model)
    row = {
        "label": args.label or Path(args.victim).stem,
        "seed": cfg.seed,
        "victim_acc": evaluate(victim, data.test),
        "victim_wm_success": watermark_success_rate(victim, wm) if wm is not None else np.nan,
        "extracted_acc": evaluate(stolen.model, data.test),
        "extracted_wm_success": watermark_success_rate(stolen.model, wm) if wm is not None else np.nan,
        "heldout_agreement": stolen.heldout_agreement,
        "n_queries": stolen.n_queries,
        "query_digest": stolen.query_digest,
    }
    append_csv(run.output("extraction_summary.csv"), [row])
    print(f"extracted model: test accuracy {row['extracted_acc']:.4f}, "
          f"watermark success {row['extracted_wm_success']:.4f}")
    return 0


def cmd_verify(run):
    args, cfg = run.args, run.config
    suspect = _load(run, args.suspect)
    wm = _load_watermark(run, args.wm, args.wm)
    p0 = _false_rate(run, wm, suspect.spec.num_classes)
    n = int(args.n or cfg["n_queries"])
    report = claim_ownership(suspect, wm, p0, n, float(cfg["confidence"]), cfg.seed)
    append_csv(run.output("ownership.csv"), [report.as_row()])
    print(report.text())
    try:
        print(f"queries needed at this success rate: {queries_needed(report.raw_success, p0, report.confidence)}")
    except UnverifiableError as exc:
        print(exc)
    return 0


def cmd_attack(run):
    args, cfg = run.args, run.config
    model = _load(run, args.model)
    victim = _load(run, args.victim) if args.victim else model
    wm = _load_watermark(run, args.wm, args.victim or args.model)
    data = load_task(cfg)
    p0 = _false_rate(run, wm, model.spec.num_classes)
    name = args.attack

    if name == "prune":
        report = AttackReport(name, "fraction", thresholds={"false_rate": p0})
        for fraction in cfg["prune_fractions"]:
            pruned = prune(model, float(fraction), data.train)
            report.add(float(fraction), evaluate(pruned, data.test), watermark_success_rate(pruned, wm), p0)
        report.write_csv(run.output("attack_prune.csv"))
        report.plot_svg(run.output("attack_prune.svg"))
        print(report.to_frame().to_string(index=False))
    elif name == "fineprune":
        fraction = float(cfg["fineprune_fraction"])
        finetune = cfg.train_config(epochs=int(cfg["fineprune_epochs"]), kappa=0.0)
        pruned = fine_prune(model, fraction, victim, data.train.inputs, finetune)
        success = watermark_success_rate(pruned, wm)
        try:
            needed = queries_needed(success, p0, float(cfg["confidence"]))
        except UnverifiableError:
            needed = np.nan
        report = AttackReport(name, "fraction", thresholds={"false_rate": p0})
        report.add(fraction, evaluate(pruned, data.test), success, p0, queries_needed=needed)
        report.write_csv(run.output("attack_fineprune.csv"))
        print(report.to_frame().to_string(index=False))
    elif name == "disentangle":
        queries = extraction_queries(cfg, data)
        labelled = label_with_victim(victim, queries)
        guess = (int(cfg["guess_source_class"]), int(cfg["guess_target_class"]))
        guessed = guessed_watermarks(labelled, guess, wm.trigger, wm.position,
                                     guess_count(labelled, float(cfg["wm_fraction"])))
        kappa = float(cfg["disentangle_kappa"])
        train_cfg = cfg.train_config(epochs=int(cfg["extract_epochs"]), kappa=kappa)
        stolen = disentangle_extract(victim, queries, model_spec(cfg, data), guessed, train_cfg)
        report = AttackReport(name, "kappa", thresholds={"false_rate": p0})
        report.add(kappa, evaluate(stolen, data.test), watermark_success_rate(stolen, wm), p0,
                   guess=f"{guess[0]}-{guess[1]}")
        report.write_csv(run.output("attack_disentangle.csv"))
        print(report.to_frame().to_string(index=False))
    elif name == "piracy":
        pirate = watermark_spec(cfg, int(cfg["pirate_source_class"]), int(cfg["pirate_target_class"]))
        result = piracy_cycle(
            victim, wm, pirate, extraction_queries(cfg, data), model_spec(cfg, data),
            cfg.train_config(epochs=int(cfg["extract_epochs"])),
            cfg.train_config(epochs=int(cfg["fineprune_epochs"]), kappa=0.0),
            float(cfg["piracy_fraction"]),
        )
        report = AttackReport(name, "stage", thresholds={"false_rate": p0})
        report.add("before", evaluate(result.doubly_watermarked, data.test), result.owner_before, p0,
                   pirate_success=result.pirate_before)
        report.add("after", evaluate(result.fine_pruned, data.test), result.owner_after, p0,
                   pirate_success=result.pirate_after)
        report.write_csv(run.output("attack_piracy.csv"))
        print(report.to_frame().to_string(index=False))
    elif name == "cleanse":
        result = neural_cleanse(model, data.test, int(cfg["cleanse_steps"]), float(cfg["cleanse_lr"]),
                                float(cfg["cleanse_lambda"]), int(cfg["cleanse_samples"]), cfg.seed)
        rows = []
        for c, (n, ok) in enumerate(zip(result.norms, result.converged)):
            others = data.test.inputs[data.test.labels != c]
            rows.append({"class": c, "l1_norm": float(n), "converged": bool(ok),
                         "trigger_success": trigger_success(model, others, result.masks[c], result.patterns[c], c)})
        append_csv(run.output("attack_cleanse.csv"), rows)
        print(f"anomaly index {result.anomaly_index:.3f} (class {result.suspect_class}): "
              f"{'BACKDOORED' if result.flagged else 'not flagged'}"
              + (" [partial: some classes did not converge]" if result.partial else ""))
    elif name == "lof":
        reports = lof_evaluation(model, data.train, wm, data.test, int(cfg["lof_neighbors"]),
                                 float(cfg["lof_threshold"]), cfg.seed)
        append_csv(run.output("attack_lof.csv"), [r.as_row() for r in reports])
        for r in reports:
            print(f"{r.space:>12s}: detection {r.detection_rate:.4f}, false flags {r.false_flag_rate:.4f}, "
                  f"accuracy cost {r.accuracy_cost:.4f}")
    elif name == "walk":
        report = adversarial_walk(model, wm.target_class, wm, int(cfg["n_walks"]), int(cfg["walk_steps"]),
                                  float(cfg["walk_step"]), cfg.seed)
        append_csv(run.output("attack_walk.csv"), [{
            "target_class": report.target_class,
            "success_rate": report.success_rate,
            "wm_similarity": report.wm_similarity,
            "random_similarity": report.random_similarity,
        }])
        print(f"walks reaching class {report.target_class}: {report.success_rate:.2f}; cosine to watermarks "
              f"{report.wm_similarity:.3f}, to noise {report.random_similarity:.3f}")
    return 0


def cmd_analyze(run):
    args, cfg = run.args, run.config
    model = _load(run, args.model)
    wm = _load_watermark(run, args.wm, args.model)
    data = load_task(cfg)
    target = data.test.of_class(wm.target_class).inputs
    if args.analysis == "activations":
        sims = frequency_similarity(activation_frequency(model, target), activation_frequency(model, wm.inputs))
        rows = [{"layer": layer, "frequency_similarity": s} for layer, s in sims.items()]
    elif args.analysis == "cka":
        rows = [{"layer": layer, "cka": v} for layer, v in layer_cka(model, wm, target).items()]
    else:
        reps = activations(model, np.concatenate([target, wm.inputs]), [model.spec.penultimate_index()])[0]
        coords, explained = pca_project(reps, 2)
        save_scatter_plot(run.output("analyze_pca.svg"),
                          {f"class {wm.target_class}": coords[:len(target)], "watermarks": coords[len(target):]},
                          "PC1", "PC2", "penultimate layer")
        rows = [{"explained_pc1": explained[0], "explained_pc2": explained[1],
                 "wm_target_distance": watermark_target_distance(model, wm, target)}]
    append_csv(run.output(f"analyze_{args.analysis}.csv"), rows)
    for row in rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_sweep(run):
    table = sweep_tradeoff(run.config, load_task(run.config),
                           csv_path=run.output("sweep.csv"), svg_path=run.output("sweep.svg"))
    failed = int((table["error"] != "").sum())
    print(table.to_string(index=False))
    if failed:
        print(f"{failed} of {len(table)} sweep points failed; see the error column")
    return 0


def cmd_toy(run):
    result = run_toy(seed=run.config.seed)
    print(result.text())
    return 0


def cmd_report(run):
    for p in run.args.inputs:
        run.manifest.add_input(p)
    summary = summarize(load_summaries(run.args.inputs))
    append_csv(run.output("report.csv"), summary)
    print(render(summary))
    return 0


HANDLERS = {
    "train": cmd_train, "extract": cmd_extract, "verify": cmd_verify, "attack": cmd_attack,
    "analyze": cmd_analyze, "sweep": cmd_sweep, "toy": cmd_toy, "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--out-dir", default="runs", help="directory for CSV, SVG and manifest outputs")
    common.add_argument("--manifest", help="manifest path (default: <out-dir>/<command>.manifest.yaml)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="ewe", description="Entangled watermark embedding experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a clean, baseline or EWE model")
    p.add_argument("--mode", choices=MODES, default="ewe")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--wm-out", help="also write the watermark set to this file")
    p.add_argument("--clean-out", help="also write the clean reference model to this file")

    p = sub.add_parser("extract", parents=[common], help="extract a victim model by retraining")
    p.add_argument("--victim", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", help="row label in extraction_summary.csv (default: victim file stem)")

    p = sub.add_parser("verify", parents=[common], help="test a suspect model for the watermark")
    p.add_argument("--suspect", required=True)
    p.add_argument("--wm", required=True, help="watermark file, or a model file with a watermark section")
    p.add_argument("--n", type=int, help="number of queries (default: n_queries)")
    p.add_argument("--p0", type=float, help="false watermark rate (default: from --clean models, else 1/K)")
    p.add_argument("--clean", nargs="*", help="clean models to estimate the false watermark rate")

    p = sub.add_parser("attack", parents=[common], help="run a watermark-removal or evasion attack")
    p.add_argument("attack", choices=ATTACKS)
    p.add_argument("--model", required=True, help="model under attack")
    p.add_argument("--victim", help="model whose labels the attacker uses (default: --model)")
    p.add_argument("--wm", help="watermark file (default: section of --victim or --model)")
    p.add_argument("--p0", type=float)
    p.add_argument("--clean", nargs="*")

    p = sub.add_parser("analyze", parents=[common], help="entanglement diagnostics")
    p.add_argument("analysis", choices=ANALYSES)
    p.add_argument("--model", required=True)
    p.add_argument("--wm")

    sub.add_parser("sweep", parents=[common], help="kappa / temperature / ratio / class-pair grid")
    sub.add_parser("toy", parents=[common], help="2-D toy demonstration")

    p = sub.add_parser("report", parents=[common], help="aggregate extraction summaries")
    p.add_argument("inputs", nargs="+")
    return parser


def _configure_logging(args):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _configure_logging(args)
    try:
        run = _Run(args, argv)
        code = HANDLERS[args.command](run)
        run.finish()
        return code
    except ConfigError as exc:
        print(f"ewe {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except EweError as exc:
        print(f"ewe {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("unhandled failure", exc_info=True)
        print(f"ewe {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
