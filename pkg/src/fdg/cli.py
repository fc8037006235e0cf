"""Command-line entry point: ``fdg {gen,train,cluster,eval,export-embeddings}``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
Outputs carry no timings or host details, so reruns with one config are byte-identical.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import clustering, encoder, evalkit, synthdata, trainer
from .config import load_config
from .container import read_container
from .errors import ConfigurationError, FormatError, NumericalError, UsageError
from .numerics import Rng

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if np.isnan(value):
        return "nan"
    return f"{value:.9g}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _effective(args, synth=None):
    """RunConfig from --config/--set; with a dataset, the gen section echoes its manifest."""
    config = load_config(args.config, args.set)
    if synth is not None:
        config = replace(config, gen=synth.config)
    return config


def _load_data(path):
    return synthdata.load_dataset(path)


def _load_checkpoint(path):
    descriptor, _ = read_container(path, encoder.CHECKPOINT_MAGIC)
    return encoder.load_checkpoint(path), descriptor.get("extra") or {}


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    config = _effective(args)
    synth = synthdata.generate(config.gen)
    synthdata.save_dataset(synth, args.out)
    sys.stdout.write(config.dump())
    print(f"wrote {len(synth.dataset)} utterances to {args.out}")


def _log_rows(state, n_specific):
    header = ["phase", "iteration", "l_agg", "l_dg"] + [f"l_sp_{j}" for j in range(n_specific)]
    rows = []
    for entry in state.log:
        rows.append([entry["phase"], entry["iteration"]] +
                    [entry[k] if k in entry else "" for k in header[2:]])
    return header, rows


def _tail_mean(state, key, n=100):
    vals = [r[key] for r in state.log if r["phase"] == "main" and key in r][-n:]
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def cmd_train(args):
    synth = _load_data(args.data)
    config = _effective(args, synth)
    cfg = config.train
    os.makedirs(args.out_dir, exist_ok=True)
    _write_text(os.path.join(args.out_dir, "config.yaml"), config.dump())
    dataset = synth.train_set()
    result = trainer.train(dataset, cfg, mode=args.mode, dump_dir=args.out_dir)
    state = result.state
    out = args.out_dir
    extra = {"loss": cfg.loss, "mode": args.mode, "seed": cfg.seed}
    if state.agg.head is not None:
        extra["head"] = {"w": state.agg.head.w, "b": state.agg.head.b}
    written = ["config.yaml", "agg_pretrain.ckpt"]
    encoder.save_checkpoint(result.pretrained, os.path.join(out, "agg_pretrain.ckpt"), {"loss": cfg.loss})
    for j, learner in enumerate(state.specifics):
        name = f"specific_{j}.ckpt"
        encoder.save_checkpoint(learner.params, os.path.join(out, name), {"loss": cfg.loss, "domain": j})
        written.append(name)
    encoder.save_checkpoint(state.agg.params, os.path.join(out, "agg_final.ckpt"), extra)
    written.append("agg_final.ckpt")
    if result.cluster_model is not None:
        clustering.save_cluster_model(result.cluster_model, os.path.join(out, "cluster.fdgc"))
        written.append("cluster.fdgc")
    if result.histogram is not None:
        _write_csv(os.path.join(out, "label_histogram.csv"), ["pseudo_domain", "count"],
                   [[j, c] for j, c in enumerate(result.histogram)])
        written.append("label_histogram.csv")
    header, rows = _log_rows(state, len(state.specifics))
    _write_csv(os.path.join(out, "train_log.csv"), header, rows)
    written += ["train_log.csv", "report.txt"]

    lines = [f"mode: {args.mode}", f"data: {os.path.basename(args.data)}",
             f"training utterances: {len(dataset)}", f"training speakers: {dataset.n_speakers}"]
    if args.mode == "protonet-baseline" and cfg.lambda_dg != 0:
        lines.append(f"note: lambda_dg={cfg.lambda_dg:g} ignored in protonet-baseline mode")
    if result.histogram is not None:
        lines.append("pseudo-domain histogram: " + " ".join(str(int(c)) for c in result.histogram))
    lines.append(f"pretrain iterations: {cfg.pretrain_iters}, main iterations: {cfg.main_iters}")
    lines.append(f"mean l_agg over last 100 main iterations: {_fmt(_tail_mean(state, 'l_agg'))}")
    lines.append(f"mean l_dg over last 100 main iterations: {_fmt(_tail_mean(state, 'l_dg'))}")
    for j in range(len(state.specifics)):
        lines.append(f"mean l_sp_{j} over last 100 main iterations: {_fmt(_tail_mean(state, f'l_sp_{j}'))}")
    lines.append("outputs: " + " ".join(written))
    lines += ["", "effective config:", config.dump()]
    _write_text(os.path.join(out, "report.txt"), "\n".join(lines))
    print("\n".join(lines[:-2]))


def cmd_cluster(args):
    synth = _load_data(args.data)
    config = _effective(args, synth)
    cfg = config.train
    m = cfg.n_domains if args.m is None else args.m
    if m < 1:
        raise UsageError("--m must be >= 1")
    params, _ = _load_checkpoint(args.checkpoint)
    dataset = synth.train_set()
    model, hist = trainer.cluster_phase(params, dataset, m, Rng(cfg.seed).split("cluster"),
                                        cfg.cluster_layers, cfg.kmeans_max_iter, cfg.kmeans_tol)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "config.yaml"), config.dump())
    clustering.save_cluster_model(model, os.path.join(args.out, "cluster.fdgc"))
    _write_csv(os.path.join(args.out, "label_histogram.csv"), ["pseudo_domain", "count"],
               [[j, c] for j, c in enumerate(hist)])
    _write_csv(os.path.join(args.out, "pseudo_labels.csv"), ["utt_id", "domain", "pseudo_domain"],
               list(zip(dataset.utt_ids, dataset.domains, dataset.pseudo)))
    print("pseudo_domain,count")
    for j, c in enumerate(hist):
        print(f"{j},{int(c)}")


def _group_of(synth, domain):
    return "in" if domain in synth.domain_group("in") else "out"


def cmd_eval(args):
    synth = _load_data(args.data)
    if args.domains is not None:
        args.set = list(args.set) + [f"eval.domains={args.domains}"]
    if args.far is not None:
        args.set = list(args.set) + ["eval.far=[" + ",".join(repr(f) for f in args.far) + "]"]
    config = _effective(args, synth)
    ev = config.eval
    params, extra = _load_checkpoint(args.checkpoint)
    metric = ev.score_metric or ("cosine" if extra.get("loss") == "angular" else "neg_sq_euclidean")
    os.makedirs(args.out_dir, exist_ok=True)
    _write_text(os.path.join(args.out_dir, "config.yaml"), config.dump())

    rows, reports = [], {}
    far_keys = [f"frr_at_far_{f:g}" for f in ev.far]
    header = ["domain", "group", "eer", "eer_step"] + far_keys + ["min_dcf", "min_dcf_raw", "n_target", "n_impostor"]
    for d in synth.domain_group(ev.domains):
        enrollment, tests = synth.eval_split(d)
        trials = evalkit.build_trials(enrollment, tests)
        scores = evalkit.score_trials(params, synth.dataset, trials, metric)
        report = evalkit.compute_metrics(scores, trials.is_target, ev.far, ev.c_fr, ev.c_fa, ev.p_target)
        evalkit.export_roc(report, os.path.join(args.out_dir, f"roc_domain{d}.csv"))
        reports[d] = report
        s = report.summary()
        rows.append([str(d), _group_of(synth, d), report.eer, report.eer_step] + [s[k] for k in far_keys] +
                    [report.min_dcf, report.min_dcf_raw, report.n_target, report.n_impostor])

    def average(label, group, members):
        # unweighted mean over domains; trial counts are summed
        cols = np.array([r[2:-2] for r in members], dtype=float).mean(axis=0)
        return [label, group] + list(cols) + [sum(r[-2] for r in members), sum(r[-1] for r in members)]

    avg_rows = []
    if ev.domains == "all":
        avg_rows = [average(f"avg_{g}", g, [r for r in rows if r[1] == g]) for g in ("in", "out")]
    avg_rows.append(average("avg", ev.domains, rows))
    _write_csv(os.path.join(args.out_dir, "metrics.csv"), header, rows + avg_rows)

    lines = [f"checkpoint: {os.path.basename(args.checkpoint)}", f"data: {os.path.basename(args.data)}",
             f"score metric: {metric}", f"domains: {ev.domains}", "", ",".join(header)]
    lines += [",".join(v if isinstance(v, str) else _fmt(v) for v in r) for r in rows + avg_rows]
    lines += ["", "effective config:", config.dump()]
    _write_text(os.path.join(args.out_dir, "report.txt"), "\n".join(lines))
    print("\n".join(lines[:-3]))


def cmd_export_embeddings(args):
    synth = _load_data(args.data)
    _effective(args, synth)
    params, _ = _load_checkpoint(args.checkpoint)
    emb = evalkit.export_embeddings(params, synth.dataset, args.out)
    print(f"wrote {emb.shape[0]} embeddings of dimension {emb.shape[1]} to {args.out}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="fdg", description="Few-shot domain generalization for verification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML run config (sections gen, train, eval)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")
        return p

    p = common(sub.add_parser("gen", help="generate a synthetic dataset"))
    p.add_argument("--out", required=True, help="dataset file to write")
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("train", help="run the training procedure"))
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=trainer.MODES, default="full")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("cluster", help="assign pseudo-domain labels with a trained encoder"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--m", type=int, default=None, help="number of pseudo-domains (default train.n_domains)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_cluster)

    p = common(sub.add_parser("eval", help="score verification trials per domain"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domains", choices=("in", "out", "all"), default=None)
    p.add_argument("--far", type=float, nargs="+", default=None, help="FAR operating points (default 0.10)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("export-embeddings", help="write every utterance embedding to CSV"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def _thread_limit():
    raw = os.environ.get("FDG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FDG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"FDG_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        with threadpool_limits(limits=_thread_limit()):
            args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ConfigurationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
