"""Command line front door.

Commands: ontology (validate | expand | closure), mine, gen, train, eval,
retrieve.  Options resolve in three layers: built-in defaults, then the
optional INI config file (one section per area), then explicit flags.  Every
artifact-producing command echoes its resolved configuration, seed included,
into the output directory so a run can be reproduced from its outputs alone.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from ontolabel import dataset as data
from ontolabel import evaluate, model, textmine, trainer
from ontolabel.losses import LossConfig
from ontolabel.ontology import OntologyError, load_ontology, parse_ontology


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_help()
        return 2
    try:
        return args.handler(args)
    except (OntologyError, data.DataFormatError, trainer.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# ----------------------------------------------------------------------
# config resolution


def _load_config(path):
    config = configparser.ConfigParser()
    if path:
        read = config.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
    return config


class _Resolved:
    """Flag value if given, else config-file value, else default."""

    def __init__(self, args, config):
        self.args = args
        self.config = config
        self.seen: dict[str, dict[str, str]] = {}

    def get(self, section, key, default, cast=str):
        flag = getattr(self.args, key, None)
        if flag is not None:
            value = flag
        elif self.config.has_option(section, key):
            raw = self.config.get(section, key)
            value = _cast(raw, cast, f"[{section}] {key}")
        else:
            value = default
        self.seen.setdefault(section, {})[key] = "" if value is None else str(value)
        return value

    def write(self, outdir: Path):
        echo = configparser.ConfigParser()
        for section in sorted(self.seen):
            echo[section] = dict(sorted(self.seen[section].items()))
        with open(outdir / "run_config.ini", "w", encoding="utf-8") as handle:
            echo.write(handle)


def _cast(raw, cast, where):
    try:
        if cast is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError:
        raise ValueError(f"bad value {raw!r} for {where}") from None


def _parse_schedule(text: str):
    """'10:0.01,5:0.001' -> ((10, 0.01), (5, 0.001))"""
    stages = []
    for part in text.split(","):
        epochs, _, rate = part.partition(":")
        stages.append((int(epochs), float(rate)))
    return tuple(stages)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# ontology subcommands


def _cmd_ontology(args) -> int:
    ontology = parse_ontology(args.ontology)
    report = ontology.validate()
    if args.action == "validate":
        print(report)
        if not report.ok:
            return 1
        try:
            ontology.exclusivity_closure()
        except OntologyError as exc:
            print(exc)
            return 1
        return 0

    # expand and closure need a fully valid ontology
    if not report.ok:
        print(report, file=sys.stderr)
        return 1
    if args.action == "closure":
        pairs = sorted(ontology.exclusivity_closure())
        lines = [f"{ontology.name_of(a)} ~ {ontology.name_of(b)}" for a, b in pairs]
        _write_lines(args.out, lines)
        return 0

    # expand: one comma-separated list of label names per input line
    out_lines = []
    with open(args.labels_in, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                out_lines.append("")
                continue
            try:
                names = [n for n in (part.strip() for part in line.split(",")) if n]
                labels = ontology.label_set_by_names(names)
            except KeyError as exc:
                raise ValueError(f"{args.labels_in}:{lineno}: {exc.args[0]}") from None
            expanded = ontology.expand(labels)
            out_lines.append(", ".join(ontology.name_of(i) for i in expanded))
    _write_lines(args.out, out_lines)
    return 0


def _write_lines(path, lines) -> None:
    text = "\n".join(lines) + ("\n" if lines else "")
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ----------------------------------------------------------------------
# mine


def _cmd_mine(args) -> int:
    ontology = load_ontology(args.ontology)
    index = textmine.build_mention_index(ontology)
    records = []
    n_skipped = 0
    with open(args.sentences, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            lesion_id, tab, sentence = line.partition("\t")
            if not tab:
                raise data.DataFormatError(
                    f"{args.sentences}:{lineno}: expected 'lesion_id<TAB>sentence'"
                )
            try:
                sent = textmine.mine_sentence(sentence, ontology, index)
            except textmine.BookmarkError as exc:
                print(f"warning: {args.sentences}:{lineno}: {exc}; row skipped", file=sys.stderr)
                n_skipped += 1
                continue
            for label_id, relevance in textmine.classify_relevance(sent):
                records.append((lesion_id.strip(), label_id, str(relevance)))
    data.write_labels(records, args.out)
    print(f"wrote {len(records)} label rows to {args.out}" + (f" ({n_skipped} row(s) skipped)" if n_skipped else ""))
    return 0


# ----------------------------------------------------------------------
# gen


def _cmd_gen(args) -> int:
    config = _load_config(args.config)
    resolved = _Resolved(args, config)
    section = "generate"
    seed = resolved.get(section, "seed", 0, int)
    n_patients = resolved.get(section, "n_patients", 200, int)
    lesions = resolved.get(section, "lesions_per_patient", 2, int)
    dim = resolved.get(section, "dim", 64, int)
    corruption = data.Corruption(
        p_drop_parent=resolved.get(section, "p_drop_parent", 0.0, float),
        p_drop_leaf=resolved.get(section, "p_drop_leaf", 0.0, float),
        p_inject=resolved.get(section, "p_inject", 0.0, float),
    )
    ratios = (
        resolved.get(section, "train_ratio", 0.8, float),
        resolved.get(section, "val_ratio", 0.1, float),
        resolved.get(section, "test_ratio", 0.1, float),
    )
    feature_noise = resolved.get(section, "feature_noise", 1.0, float)

    ontology = load_ontology(args.ontology)
    ds = data.generate_synthetic(
        ontology,
        n_patients,
        lesions,
        dim,
        corruption,
        seed,
        split_ratios=ratios,
        feature_noise=feature_noise,
    )
    out = _outdir(args.outdir)
    data.write_dataset(ds, out / "dataset.tsv")
    clean_rows = []
    for s in ds.samples:
        for label_id in s.clean_labels.ids():
            clean_rows.append((s.lesion_id, label_id, "relevant"))
    data.write_labels(clean_rows, out / "clean_labels.tsv")
    resolved.write(out)
    counts = {name: len(ds.split(name)) for name in data.SPLITS}
    print(
        f"generated {len(ds)} lesions "
        f"(train {counts['train']}, val {counts['val']}, test {counts['test']}) in {out}"
    )
    return 0


# ----------------------------------------------------------------------
# train


def _loss_config(args, resolved) -> LossConfig:
    section = "loss"
    return LossConfig(
        beta_clamp=resolved.get(section, "beta_clamp", 300.0, float),
        gamma=resolved.get(section, "gamma", 2.0, float),
        hard_pair_draws=resolved.get(section, "hard_pair_draws", 10_000, int),
        sim_threshold=resolved.get(section, "sim_threshold", 1.0, float),
        margin=resolved.get(section, "margin", 0.1, float),
        triplet_draws=resolved.get(section, "triplet_draws", 5000, int),
        triplet_weight=resolved.get(section, "triplet_weight", 5.0, float),
        use_hard_mining=not args.no_rhem,
        use_refined_ce=not args.no_spl,
        use_triplet=not args.no_triplet,
        hard_mining_all_negatives=bool(args.rhem_all_negatives),
    )


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    resolved = _Resolved(args, config)
    section = "train"
    seed = resolved.get(section, "seed", 0, int)
    batch_size = resolved.get(section, "batch_size", 128, int)
    schedule = resolved.get(section, "lr_schedule", "10:0.01,5:0.001", str)
    momentum = resolved.get(section, "momentum", 0.0, float)
    hidden = resolved.get(section, "hidden", 256, int)
    embed_dim = resolved.get(section, "embed_dim", 256, int)
    min_train = resolved.get(section, "min_train", 0, int)
    min_val = resolved.get(section, "min_val", 0, int)
    min_test = resolved.get(section, "min_test", 0, int)
    loss_config = _loss_config(args, resolved)
    resolved.seen.setdefault("train", {})["no_expand"] = str(bool(args.no_expand))
    resolved.seen["train"]["no_relevance_filter"] = str(bool(args.no_relevance_filter))

    ontology = load_ontology(args.ontology)
    ds = data.load_dataset(
        args.dataset,
        ontology,
        label_file=args.labels,
        clean_file=args.clean_labels,
        include_irrelevant=bool(args.no_relevance_filter),
    )
    if min_train or min_val or min_test:
        ds, _ = data.filter_vocabulary(ds, min_train, min_val, min_test)

    train_config = trainer.TrainConfig(
        batch_size=batch_size,
        lr_schedule=_parse_schedule(schedule),
        seed=seed,
        momentum=momentum,
        expand_labels=not args.no_expand,
        loss=loss_config,
    )
    params = model.ModelParams.init(
        ds.dim, ds.ontology.n_labels, hidden=hidden, embed_dim=embed_dim, seed=seed
    )
    params, history = trainer.train(ds, ds.ontology, params, train_config)

    val_rows = ds.split("val")
    if not val_rows:
        raise ValueError("validation split is empty; cannot calibrate thresholds")
    cache = model.forward(params, np.stack([s.features for s in val_rows]))
    val_scores = cache.sigma_refined if loss_config.use_refined_ce else cache.sigma_scores
    val_truth = evaluate._truth_sets(val_rows, "auto")
    truth_matrix = np.zeros((len(val_rows), ds.ontology.n_labels))
    for r, labels in enumerate(val_truth):
        for i in labels:
            truth_matrix[r, i] = 1.0
    thresholds, _ = evaluate.calibrate_thresholds(val_scores, truth_matrix)

    out = _outdir(args.outdir)
    model.save_checkpoint(out / "checkpoint.bin", params, ds.ontology.names(), thresholds)
    with open(out / "train_log.tsv", "w", encoding="utf-8") as handle:
        handle.write("epoch\tweighted\tmined\trefined\ttriplet\ttotal\tseconds\n")
        for row in history:
            handle.write(
                f"{row.epoch}\t{row.weighted:.6f}\t{row.mined:.6f}\t{row.refined:.6f}"
                f"\t{row.triplet:.6f}\t{row.total:.6f}\t{row.seconds:.3f}\n"
            )
    resolved.write(out)
    print(f"trained {len(history)} epochs; final total loss {history[-1].total:.6f}; checkpoint in {out}")
    return 0


# ----------------------------------------------------------------------
# eval


def _restricted_to_checkpoint(ds, label_names):
    if label_names == ds.ontology.names():
        return ds
    by_name = {name: i for i, name in enumerate(ds.ontology.names())}
    missing = [name for name in label_names if name not in by_name]
    if missing:
        raise ValueError(f"checkpoint labels missing from the ontology: {missing[:5]}")
    restricted, _ = data.restrict_dataset(ds, [by_name[name] for name in label_names])
    return restricted


def _cmd_eval(args) -> int:
    config = _load_config(args.config)
    resolved = _Resolved(args, config)
    section = "eval"
    split = resolved.get(section, "split", "test", str)
    truth = resolved.get(section, "truth", "auto", str)
    resolved.seen.setdefault(section, {})["score"] = "raw" if args.raw_scores else "refined"
    resolved.seen[section]["no_expand"] = str(bool(args.no_expand))

    ontology = load_ontology(args.ontology)
    ds = data.load_dataset(
        args.dataset, ontology, label_file=args.labels, clean_file=args.clean_labels
    )
    params, label_names, thresholds = model.load_checkpoint(args.checkpoint)
    if thresholds is None:
        raise ValueError(f"{args.checkpoint}: checkpoint carries no calibrated thresholds")
    ds = _restricted_to_checkpoint(ds, label_names)

    report = evaluate.evaluate_split(
        ds,
        split,
        params,
        thresholds,
        use_refined=not args.raw_scores,
        expand_decisions=not args.no_expand,
        truth=truth,
    )
    out = _outdir(args.outdir)
    (out / "report.txt").write_text(evaluate.render_text(report), encoding="utf-8")
    (out / "report.kv").write_text(evaluate.render_kv(report), encoding="utf-8")
    resolved.write(out)
    print(
        f"split {split}: macro AUC {report.macro_auc:.4f}, macro F1 {report.macro_f1:.4f} "
        f"({len(report.rows)} labels evaluated, {len(report.excluded)} excluded); report in {out}"
    )
    return 0


# ----------------------------------------------------------------------
# retrieve


def _cmd_retrieve(args) -> int:
    config = _load_config(args.config)
    resolved = _Resolved(args, config)
    section = "retrieve"
    k = resolved.get(section, "k", 5, int)
    query_split = resolved.get(section, "query_split", "test", str)
    gallery_split = resolved.get(section, "gallery_split", "train", str)
    truth = resolved.get(section, "truth", "auto", str)

    ontology = load_ontology(args.ontology)
    ds = data.load_dataset(
        args.dataset, ontology, label_file=args.labels, clean_file=args.clean_labels
    )
    params, label_names, _ = model.load_checkpoint(args.checkpoint)
    ds = _restricted_to_checkpoint(ds, label_names)

    mean_acg, rows = evaluate.retrieval_report(
        ds, params, k, query_split=query_split, gallery_split=gallery_split, truth=truth
    )
    out = _outdir(args.outdir)
    with open(out / "retrieval.tsv", "w", encoding="utf-8") as handle:
        handle.write("query\tacg\tretrieved\n")
        for lesion_id, gain, picked in rows:
            handle.write(f"{lesion_id}\t{gain:.6f}\t{','.join(picked)}\n")
    resolved.write(out)
    print(f"ACG@{k} = {mean_acg:.4f} over {len(rows)} queries; rows in {out}")
    return 0


# ----------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ontolabel",
        description="Ontology-guided multilabel annotation over feature vectors.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ontology", help="validate, expand, or close a label graph")
    p.add_argument("action", choices=("validate", "expand", "closure"))
    p.add_argument("--ontology", required=True)
    p.add_argument("--labels-in", help="label-name lists to expand, one per line")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(handler=_cmd_ontology)

    p = sub.add_parser("mine", help="extract relevance-classified labels from sentences")
    p.add_argument("--ontology", required=True)
    p.add_argument("--sentences", required=True, help="lesion_id<TAB>sentence per line")
    p.add_argument("--out", required=True, help="label file to write")
    p.set_defaults(handler=_cmd_mine)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--ontology", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-patients", dest="n_patients", type=int)
    p.add_argument("--lesions-per-patient", dest="lesions_per_patient", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--p-drop-parent", dest="p_drop_parent", type=float)
    p.add_argument("--p-drop-leaf", dest="p_drop_leaf", type=float)
    p.add_argument("--p-inject", dest="p_inject", type=float)
    p.add_argument("--train-ratio", dest="train_ratio", type=float)
    p.add_argument("--val-ratio", dest="val_ratio", type=float)
    p.add_argument("--test-ratio", dest="test_ratio", type=float)
    p.add_argument("--feature-noise", dest="feature_noise", type=float)
    p.set_defaults(handler=_cmd_gen)

    for name, handler in (("train", _cmd_train), ("eval", _cmd_eval), ("retrieve", _cmd_retrieve)):
        p = sub.add_parser(name)
        p.add_argument("--ontology", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--labels", help="optional label file joined on lesion_id")
        p.add_argument("--clean-labels", dest="clean_labels", help="ground-truth label file")
        p.add_argument("--outdir", required=True)
        p.add_argument("--config")
        if name == "train":
            p.add_argument("--seed", type=int)
            p.add_argument("--batch-size", dest="batch_size", type=int)
            p.add_argument("--lr-schedule", dest="lr_schedule", help="e.g. 10:0.01,5:0.001")
            p.add_argument("--momentum", type=float)
            p.add_argument("--hidden", type=int)
            p.add_argument("--embed-dim", dest="embed_dim", type=int)
            p.add_argument("--min-train", dest="min_train", type=int)
            p.add_argument("--min-val", dest="min_val", type=int)
            p.add_argument("--min-test", dest="min_test", type=int)
            p.add_argument("--beta-clamp", dest="beta_clamp", type=float)
            p.add_argument("--gamma", type=float)
            p.add_argument("--hard-pair-draws", dest="hard_pair_draws", type=int)
            p.add_argument("--sim-threshold", dest="sim_threshold", type=float)
            p.add_argument("--margin", type=float)
            p.add_argument("--triplet-draws", dest="triplet_draws", type=int)
            p.add_argument("--triplet-weight", dest="triplet_weight", type=float)
            # ablation switches
            p.add_argument("--no-spl", action="store_true", help="disable the score refinement loss")
            p.add_argument("--no-rhem", action="store_true", help="disable hard example mining")
            p.add_argument("--no-triplet", action="store_true", help="disable the triplet loss")
            p.add_argument("--no-expand", action="store_true", help="train on unexpanded labels")
            p.add_argument(
                "--no-relevance-filter", action="store_true",
                help="keep irrelevant label rows when joining a label file",
            )
            p.add_argument(
                "--rhem-all-negatives", action="store_true",
                help="mine over all non-positive pairs instead of reliable ones",
            )
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split")
            p.add_argument("--truth", choices=("auto", "clean", "expanded"))
            p.add_argument("--raw-scores", dest="raw_scores", action="store_true",
                           help="score the raw confidences (refinement ablation)")
            p.add_argument("--no-expand", action="store_true", help="do not expand decisions")
        if name == "retrieve":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--k", type=int)
            p.add_argument("--query-split", dest="query_split")
            p.add_argument("--gallery-split", dest="gallery_split")
            p.add_argument("--truth", choices=("auto", "clean", "expanded"))
        p.set_defaults(handler=handler)

    return parser


if __name__ == "__main__":
    sys.exit(main())
