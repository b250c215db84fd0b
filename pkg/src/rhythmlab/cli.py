"""Command-line entry point: ``rhythmlab <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import correlates as corr
from . import representation as rep
from .audio_features import AudioError, decode_audio, extract_features
from .corpus import (
    CorpusError,
    SegmentRecord,
    WeightConfig,
    assemble_segments,
    compute_sample_weights,
    load_manifest,
    load_segment_cache,
    save_segment_cache,
    split_train_test,
)
from .rhythm_metrics import METRIC_NAMES, SegmentationError, compute_metrics, parse_segmentation, write_metrics_csv
from .rnn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .rnn.model import ModelError, init_model
from .rnn.train import LabelMismatch, TrainConfig, TrainingDiverged, evaluate, final_outputs, train

log = logging.getLogger("rhythmlab")

DEFAULT_CACHE = "rhythmlab-cache"
QDA_METRICS = ("percent_v", "delta_c", "npvi_v", "rpvi_c")


class UsageError(Exception):
    pass


def _cache_dir(args) -> Path:
    return Path(args.cache_dir or os.environ.get("RHYTHMLAB_CACHE") or DEFAULT_CACHE)


def _split_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".split.json")


def _require(path, what):
    if path is None:
        raise UsageError(f"missing {what}")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _select_split(segments, checkpoint, split):
    if split == "all":
        return segments
    sp = _split_path(checkpoint)
    if not sp.exists():
        raise UsageError(f"no split file next to checkpoint ({sp}); use --split all")
    test_speakers = set(json.loads(sp.read_text())["test_speakers"])
    return [s for s in segments if (s.speaker_id in test_speakers) == (split == "test")]


def _balanced(segments, per_language, seed):
    """Random balanced subset: ``per_language`` segments of every language (default: the minimum count)."""
    rng = np.random.default_rng(seed)
    by_lang = {}
    for i, s in enumerate(segments):
        by_lang.setdefault(s.language, []).append(i)
    n = per_language or min(len(v) for v in by_lang.values())
    short = {k: len(v) for k, v in by_lang.items() if len(v) < n}
    if short:
        raise UsageError(f"not enough segments for {n} per language: {short}")
    chosen = []
    for lang in sorted(by_lang):
        idx = by_lang[lang]
        chosen += [idx[i] for i in sorted(rng.choice(len(idx), n, replace=False))]
    return [segments[i] for i in chosen], chosen


def _sentences(manifest, languages=None, resample=False, need_segmentation=False):
    """One full-length feature sequence per manifest entry (no 10 s cutting)."""
    index = load_manifest(manifest, languages)
    records, seqs = [], []
    for e in index.entries:
        feats = extract_features(decode_audio(e.path, resample_to_16k=resample))
        records.append(SegmentRecord(feats, index.language_index(e.language), e.speaker_id, e.source, (e.path,)))
        if need_segmentation:
            seg = e.extra.get("segmentation")
            if seg is None:
                raise UsageError(f"{e.path}: manifest line lacks a 'segmentation' field")
            seg_path = Path(seg) if Path(seg).is_absolute() else Path(manifest).parent / seg
            seqs.append(parse_segmentation(seg_path, Path(e.path).stem, e.language))
    return index, records, seqs


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args):
    from .synth import write_corpus

    manifest = write_corpus(args.out, args.per_language, args.speakers, args.seed, args.duration)
    print(f"wrote {manifest}")


def cmd_features(args):
    index = load_manifest(_require(args.manifest, "--manifest"))
    errors = []
    segments = assemble_segments(index, resample=args.resample, jobs=args.jobs,
                                 on_error=lambda p, e: errors.append((p, e)))
    for path, exc in errors:
        print(f"warning: {exc}", file=sys.stderr)
    if not segments:
        raise UsageError("no 10-second segments could be assembled")
    cache = _cache_dir(args)
    save_segment_cache(cache, segments, index.languages)
    print(f"{len(segments)} segments, {len(index.languages)} languages -> {cache}")


def cmd_train(args):
    if args.checkpoint is None:
        raise UsageError("missing --checkpoint (output path)")
    segments, languages = load_segment_cache(_cache_dir(args))
    train_set, test_set = split_train_test(segments, args.test_fraction, args.seed)
    weights = compute_sample_weights(train_set, WeightConfig(args.k1, args.k2))
    config = TrainConfig(lr0=args.lr, lr_decay=args.lr_decay, momentum=args.momentum,
                         tbptt_len=args.tbptt, epochs=args.epochs, batch_size=args.batch_size,
                         augment=not args.no_augment, seed=args.seed)
    model = init_model(labels=languages, hidden=args.hidden, seed=args.seed)
    model, history = train(model, train_set, weights, config, test_set or None)
    save_checkpoint(model, args.checkpoint)
    test_speakers = sorted({s.speaker_id for s in test_set})
    _split_path(args.checkpoint).write_text(json.dumps({"test_speakers": test_speakers, "seed": args.seed}, indent=1))
    if args.log:
        _write_rows(args.log, ["epoch", "lr", "loss", "accuracy", "top3", "test_accuracy", "test_top3"],
                    [[h.epoch, h.lr, h.loss, h.accuracy, h.top3, h.test_accuracy, h.test_top3] for h in history])
    last = history[-1]
    print(f"trained {len(history)} epochs; train acc {last.accuracy:.3f}; test acc {last.test_accuracy}")


def cmd_eval(args):
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    segments, languages = load_segment_cache(_cache_dir(args))
    if list(languages) != list(model.labels):
        raise LabelMismatch(f"checkpoint labels {model.labels} do not match corpus labels {languages}")
    segments = _select_split(segments, args.checkpoint, args.split)
    ev = evaluate(model, segments, languages)
    print(f"segments {len(segments)} accuracy {ev.accuracy:.4f} top3 {ev.top3_accuracy:.4f}")
    if args.out:
        conf = ev.normalized_confusion() if args.normalize else ev.confusion
        _write_rows(args.out, ["true\\pred", *languages],
                    [[lang, *row.tolist()] for lang, row in zip(languages, conf)])


def cmd_histograms(args):
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    segments, languages = load_segment_cache(_cache_dir(args))
    segments = _select_split(segments, args.checkpoint, args.split)
    subset, _ = _balanced(segments, args.per_language, args.seed)
    omega, outputs = rep.collect_histograms(model, subset, seed=args.seed, repeats=args.repeats)
    _write_rows(args.out, ["language", *[f"r{n}" for n in range(omega.shape[1])]],
                [[lang, *map(repr, row.tolist())] for lang, row in zip(languages, omega)])
    print(f"histograms over {len(subset)} recordings -> {args.out}")


def _load_dissimilarity(args) -> rep.DissimilarityMatrix:
    if args.dissimilarity:
        return rep.read_dissimilarity_csv(_require(args.dissimilarity, "--dissimilarity"))
    path = _require(args.histograms, "--histograms or --dissimilarity")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    labels = [r[0] for r in rows]
    omega = np.array([[float(v) for v in r[1:]] for r in rows])
    D = rep.dissimilarity_matrix(omega, labels, args.measure)
    if args.languages:
        D = D.subset(args.languages.split(","))
    return D


def cmd_cluster(args):
    D = _load_dissimilarity(args)
    tree = rep.hierarchical_cluster(D, linkage=args.linkage)
    Path(args.out).write_text(tree.to_json())
    if args.matrix_out:
        rep.write_dissimilarity_csv(args.matrix_out, D)
    print(f"dendrogram ({args.linkage}, {D.measure}) -> {args.out}")


def cmd_mds(args):
    D = _load_dissimilarity(args)
    res = rep.mds(D, seed=args.seed)
    rep.write_embedding_csv(args.out, D.labels, D.labels, res.coords)
    print(f"MDS stress {res.stress:.4f}{'' if res.converged else ' (not converged)'} -> {args.out}")


def cmd_tsne(args):
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    segments, languages = load_segment_cache(_cache_dir(args))
    segments = _select_split(segments, args.checkpoint, args.split)
    subset, chosen = _balanced(segments, args.per_language, args.seed)
    outputs = final_outputs(model, subset, mode="analysis", rng=np.random.default_rng(args.seed))
    per_class = len(subset) // len({s.language for s in subset})
    perplexity = args.perplexity or per_class
    res = rep.tsne(np.sqrt(outputs), perplexity=perplexity, seed=args.seed)
    if args.label_by == "predicted":
        tags = [languages[i] for i in outputs.argmax(axis=1)]
    else:
        tags = [languages[s.language] for s in subset]
    rep.write_embedding_csv(args.out, [f"seg{i}" for i in chosen], tags, res.embedding)
    print(f"t-SNE of {len(subset)} points, perplexity {perplexity}, KL {res.kl:.4f} -> {args.out}")


def cmd_metrics(args):
    rows = []
    if args.manifest:
        index = load_manifest(args.manifest)
        for e in index.entries:
            seg = e.extra.get("segmentation")
            if seg is None:
                raise UsageError(f"{e.path}: manifest line lacks a 'segmentation' field")
            seg_path = Path(seg) if Path(seg).is_absolute() else Path(args.manifest).parent / seg
            seq = parse_segmentation(seg_path, Path(e.path).stem, e.language)
            rows.append((seq.sentence_id, e.language, compute_metrics(seq)))
    for path in args.files:
        seq = parse_segmentation(path, language=args.language or "")
        rows.append((seq.sentence_id, seq.language, compute_metrics(seq)))
    if not rows:
        raise UsageError("no segmentation input (give files or --manifest)")
    write_metrics_csv(args.out, rows)
    print(f"{len(rows)} sentences -> {args.out}")


def cmd_correlate(args):
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    index, records, seqs = _sentences(_require(args.manifest, "--manifest"), resample=args.resample,
                                      need_segmentation=True)
    table = corr.collect_activations(model, records, [e.language for e in index.entries],
                                     layer=args.layer, seed=args.seed)
    metrics = np.array([compute_metrics(s).as_array() for s in seqs])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for m_idx, name in enumerate(METRIC_NAMES):
        y = metrics[:, m_idx]
        ok = np.isfinite(y)
        if ok.sum() < max(args.folds, 3):
            log.warning("skipping %s: defined for only %d sentences", name, ok.sum())
            continue
        cell = corr.single_cell_correlation(table.values[ok], y[ok], n_metrics=len(METRIC_NAMES))
        _write_rows(out / f"cells_{name}.csv", ["unit", "r", "p", "significant"],
                    [[u, cell.r[u], cell.p[u], bool(cell.significant[u])] for u in range(len(cell.r))])
        fit = corr.elastic_net_fit(table.values[ok], y[ok], r1=args.r1, folds=args.folds,
                                   groups=np.array(table.languages)[ok], seed=args.seed,
                                   metric=name, layer=args.layer)
        (out / f"correlate_{name}.json").write_text(fit.to_json())
        pred = fit.predict(table.values[ok])
        fit_r = float(np.corrcoef(pred, y[ok])[0, 1]) if np.std(pred) > 0 else float("nan")
        best = cell.best() if np.any(cell.defined) else -1
        summary.append([name, best, cell.r[best] if best >= 0 else "", fit.alpha, int(np.sum(fit.weights != 0)), fit_r])
    _write_rows(out / "summary.csv", ["metric", "best_unit", "best_r", "alpha", "nonzero", "fit_r"], summary)
    print(f"correlates for {len(summary)} metrics (layer {args.layer}) -> {out}")


def _load_correlate(path) -> corr.LinearCorrelate:
    return corr.LinearCorrelate.from_json(_require(path, "correlate file").read_text())


def cmd_map(args):
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    cx, cy = _load_correlate(args.x), _load_correlate(args.y)
    if cx.layer != cy.layer:
        raise UsageError("the two correlates come from different layers")
    index, records, _ = _sentences(_require(args.manifest, "--manifest"), resample=args.resample)
    table = corr.collect_activations(model, records, [e.language for e in index.entries],
                                     layer=cx.layer, seed=args.seed)
    groups = {}
    for lang, row in zip(table.languages, table.values):
        groups.setdefault(lang, []).append(row)
    points = corr.project_map(cx, cy, {k: np.array(v) for k, v in groups.items()}, space=args.space)
    corr.write_map_csv(args.out, points, args.corpus_tag)
    print(f"map of {len(points)} languages -> {args.out}")
    if len(groups) > 1:
        for axis, c in (("x", cx), ("y", cy)):
            try:
                f = corr.f_ratio([c.predict(np.array(v)) for v in groups.values()])
            except corr.CorrelateError as exc:
                print(f"{axis} ({c.metric}): F-ratio undefined ({exc})")
                continue
            print(f"{axis} ({c.metric}): F({f.df_between},{f.df_within}) = {f.F:.3g}, p = {f.p:.3g}")


def _correlate_points(model, correlates, manifest, resample, seed):
    index, records, _ = _sentences(manifest, resample=resample)
    table = corr.collect_activations(model, records, [e.language for e in index.entries],
                                     layer=correlates[0].layer, seed=seed)
    return np.stack([c.project(table.values) for c in correlates], axis=1), table.languages


def cmd_qda(args):
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    paths = args.correlates or [Path(args.correlate_dir or ".") / f"correlate_{m}.json" for m in QDA_METRICS]
    correlates = [_load_correlate(p) for p in paths]
    X, y = _correlate_points(model, correlates, _require(args.manifest, "--manifest"), args.resample, args.seed)
    qda = corr.qda_fit(X, y, priors=args.priors)
    acc, top3 = corr.qda_score(qda, X, y)
    print(f"QDA train accuracy {acc:.4f} top3 {top3:.4f} ({len(y)} points, {len(qda.classes)} classes)")
    if args.test_manifest:
        Xt, yt = _correlate_points(model, correlates, _require(args.test_manifest, "--test-manifest"),
                                   args.resample, args.seed)
        acc, top3 = corr.qda_score(qda, Xt, yt)
        print(f"QDA test accuracy {acc:.4f} top3 {top3:.4f} ({len(yt)} points)")


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rhythmlab", description=__doc__)
    parser.add_argument("--config", help="JSON file of flag defaults (flags on the command line win)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1, help="worker processes / BLAS threads (1 = reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        return p

    def cache(p):
        p.add_argument("--cache-dir", help="segment cache (default $RHYTHMLAB_CACHE or ./rhythmlab-cache)")

    def dissim(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--histograms", help="CSV written by 'histograms'")
        g.add_argument("--dissimilarity", help="dissimilarity matrix CSV")
        p.add_argument("--measure", choices=list(rep.MEASURES), default="bhattacharyya")
        p.add_argument("--languages", help="comma-separated subset of languages")

    p = add("synth", cmd_synth, "write the synthetic three-language corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-language", type=int, default=200)
    p.add_argument("--speakers", type=int, default=20, help="speakers per language")
    p.add_argument("--duration", type=float, default=10.0, help="seconds per recording")

    p = add("features", cmd_features, "manifest -> segment feature cache")
    p.add_argument("--manifest")
    p.add_argument("--resample", action="store_true", help="resample non-16 kHz audio")
    cache(p)

    p = add("train", cmd_train, "train the LSTM on a segment cache")
    cache(p)
    p.add_argument("--checkpoint", help="output checkpoint path")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--lr-decay", type=float, default=0.93)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--tbptt", type=int, default=32)
    p.add_argument("--hidden", type=int, default=150)
    p.add_argument("--test-fraction", type=float, default=0.08)
    p.add_argument("--k1", type=float, default=20.0)
    p.add_argument("--k2", type=float, default=5.0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--log", help="per-epoch CSV log")

    p = add("eval", cmd_eval, "accuracy, top-3 and confusion matrix")
    cache(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--out", help="confusion matrix CSV")
    p.add_argument("--normalize", action="store_true", help="row-normalize the confusion matrix")

    p = add("histograms", cmd_histograms, "per-language output histograms")
    cache(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=["test", "train", "all"], default="all")
    p.add_argument("--per-language", type=int)
    p.add_argument("--repeats", type=int, default=1, help="dropout draws averaged per recording")
    p.add_argument("--out", required=True)

    p = add("cluster", cmd_cluster, "hierarchical clustering of languages")
    dissim(p)
    p.add_argument("--linkage", choices=list(rep.LINKAGES), default="complete")
    p.add_argument("--out", required=True, help="dendrogram JSON")
    p.add_argument("--matrix-out", help="also write the dissimilarity matrix CSV")

    p = add("mds", cmd_mds, "metric MDS of languages")
    dissim(p)
    p.add_argument("--out", required=True)

    p = add("tsne", cmd_tsne, "t-SNE of per-recording outputs")
    cache(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=["test", "train", "all"], default="all")
    p.add_argument("--per-language", type=int)
    p.add_argument("--perplexity", type=float, help="default: points per language")
    p.add_argument("--label-by", choices=["true", "predicted"], default="true")
    p.add_argument("--out", required=True)

    p = add("metrics", cmd_metrics, "rhythm metrics from C/V segmentation files")
    p.add_argument("files", nargs="*")
    p.add_argument("--manifest", help="manifest whose lines carry a 'segmentation' field")
    p.add_argument("--language")
    p.add_argument("--out", required=True)

    p = add("correlate", cmd_correlate, "single-cell and ElasticNet correlates of rhythm metrics")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", help="sentences with 'segmentation' fields")
    p.add_argument("--layer", type=int, choices=[1, 2], default=2)
    p.add_argument("--r1", type=float, default=0.2)
    p.add_argument("--folds", type=int, default=7)
    p.add_argument("--resample", action="store_true")
    p.add_argument("--out-dir", required=True)

    p = add("map", cmd_map, "language map in a two-correlate space")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--x", required=True, help="correlate JSON for the x axis")
    p.add_argument("--y", required=True, help="correlate JSON for the y axis")
    p.add_argument("--space", choices=["metric", "normalized"], default="metric")
    p.add_argument("--corpus-tag", default="")
    p.add_argument("--resample", action="store_true")
    p.add_argument("--out", required=True)

    p = add("qda", cmd_qda, "QDA in the space of four correlates")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--test-manifest")
    p.add_argument("--correlates", nargs=4, help="four correlate JSON files")
    p.add_argument("--correlate-dir", help="directory written by 'correlate'")
    p.add_argument("--priors", choices=["empirical", "uniform"], default="empirical")
    p.add_argument("--resample", action="store_true")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        # re-parse so that explicit flags override the file
        parser.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                sp.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()
                                   if any(a.dest == k.replace("-", "_") for a in sp._actions)})
        args = parser.parse_args(argv)
    return args


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=max(args.jobs, 1)):
            args.func(args)
    except (UsageError, CorpusError, AudioError, SegmentationError, CheckpointError, ModelError,
            LabelMismatch, TrainingDiverged, corr.CorrelateError, rep.RepresentationError) as exc:
        print(f"rhythmlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"rhythmlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
