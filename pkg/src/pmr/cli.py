"""Stage-per-subcommand pipeline driver.

Layout under ``--out``::

    dataset/annotations.jsonl, dataset/vocab.pmrv, dataset/videos/<id>.pmrf   (gen)
    encoded/<id>.pmrf        cached beholder inputs + "features" (T x d_model)   (encode)
    labels/<id>.pmrf         L_S, L_E, L_A                                       (labels)
    train/params.pmrf, train/loss_log.csv, train/summary.txt                     (train)
    propose/proposals.jsonl  [propose/maps/<id>.pmrf when eval.dump_maps]        (propose)
    eval/curve.csv, eval/summary.txt                                             (eval)

Exit codes: 0 ok, 2 configuration error, 3 missing input, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import dataio
from .beholders import VideoInputs, encode_inputs, prepare_video
from .bmn import LabelSet, make_labels, read_proposals, write_proposals
from .config import ConfigError, RunConfig, load_config
from .evaluation import ar_at_an, diversity_div_n, export_curve, repetition_r_n
from .model import ModelDims, init_model, predict, propose
from .numerics import NumericError, ParamStore
from .training import train

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4


class MissingInput(RuntimeError):
    def __init__(self, what: Path, stage: str | None):
        hint = f"; run stage {stage} first" if stage else ""
        super().__init__(f"missing {what}{hint}")


def _require(path: Path, stage: str | None) -> Path:
    if not path.exists():
        raise MissingInput(path, stage)
    return path


def _pmap(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def model_dims(cfg: RunConfig, vocab: dataio.Vocabulary | None = None) -> ModelDims:
    F = vocab.text_features.shape[1] if vocab is not None else cfg.dims.E
    d = cfg.dims
    return ModelDims(C=d.C, F=F, T=d.T, d_model=d.d_model, hidden=d.hidden, K=d.K, P=d.P)


def _annotations(cfg: RunConfig) -> list[dataio.VideoAnnotation]:
    return dataio.read_annotations(_require(cfg.dataset_dir / "annotations.jsonl", "gen"))


def _split(cfg: RunConfig, anns):
    cut = len(anns) - cfg.train.holdout
    return anns[:cut], anns[cut:]


def _load_params(path: Path, stage: str | None) -> ParamStore:
    return ParamStore.from_state(dataio.read_arrays(_require(path, stage)))


def _load_inputs(cfg: RunConfig, anns) -> list[VideoInputs]:
    enc = cfg.out / "encoded"
    return [
        VideoInputs.from_arrays(dataio.read_arrays(_require(enc / f"{a.video_id}.pmrf", "encode")))
        for a in anns
    ]


# --------------------------------------------------------------------------
# stages


def cmd_gen(cfg: RunConfig, jobs: int = 1) -> None:
    d = cfg.dims
    ds = dataio.generate_synthetic(
        cfg.train.seed, cfg.data.n_videos, d.T, d.C, d.H, d.W, d.E, cfg.data.vocab_size, cfg.data.signal()
    )
    dataio.write_dataset(ds, cfg.dataset_dir)
    n_gt = sum(len(a.actions) for a in ds.annotations)
    print(f"videos={len(ds.annotations)} actions={n_gt} vocab={len(ds.vocab)} -> {cfg.dataset_dir}")


def cmd_encode(cfg: RunConfig, jobs: int = 1) -> None:
    anns = _annotations(cfg)
    vocab = dataio.read_vocabulary(_require(cfg.vocab_path, "gen"))
    dims = model_dims(cfg, vocab)
    store = _load_params(Path(cfg.paths.params), None) if cfg.paths.params else init_model(dims, cfg.train.seed)
    out = dataio.ensure_dir(cfg.out / "encoded")
    videos_dir = cfg.dataset_dir / "videos"

    def one(ann):
        bundles = dataio.read_video_bundles(_require(videos_dir / f"{ann.video_id}.pmrf", "gen"))
        if len(bundles) != dims.T:
            raise ConfigError("dims.T", f"{ann.video_id} has {len(bundles)} snippets, config says {dims.T}")
        inputs = prepare_video(bundles, vocab, dims.encoder)
        arrays = inputs.to_arrays()
        arrays["features"] = encode_inputs(store, [inputs]).data[0]
        dataio.write_arrays(arrays, out / f"{ann.video_id}.pmrf")

    _pmap(one, anns, jobs)
    print(f"encoded {len(anns)} videos -> {out}")


def cmd_labels(cfg: RunConfig, jobs: int = 1) -> None:
    anns = _annotations(cfg)
    out = dataio.ensure_dir(cfg.out / "labels")
    T = cfg.dims.T

    def one(ann):
        dataio.write_arrays(make_labels(ann, T).to_arrays(), out / f"{ann.video_id}.pmrf")

    _pmap(one, anns, jobs)
    print(f"labels for {len(anns)} videos -> {out}")


def cmd_train(cfg: RunConfig, jobs: int = 1) -> None:
    anns, _ = _split(cfg, _annotations(cfg))
    videos = _load_inputs(cfg, anns)
    labels = [
        LabelSet.from_arrays(dataio.read_arrays(_require(cfg.out / "labels" / f"{a.video_id}.pmrf", "labels")))
        for a in anns
    ]
    vocab = dataio.read_vocabulary(_require(cfg.vocab_path, "gen"))
    store = init_model(model_dims(cfg, vocab), cfg.train.seed)
    t = cfg.train
    res = train(store, videos, labels, t.iterations, t.batch_size, t.lr, t.seed, t.lambda_act)
    out = dataio.ensure_dir(cfg.out / "train")
    cfg.params_path.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_arrays(store.state(), cfg.params_path)
    with open(out / "loss_log.csv", "w") as fh:
        fh.write("iteration,loss\n")
        for i, loss in enumerate(res.losses, start=1):
            fh.write(f"{i},{loss:.8f}\n")
    (out / "summary.txt").write_text(
        f"initial_loss={res.initial_full_loss:.8f}\nfinal_loss={res.final_full_loss:.8f}\n"
    )
    print(f"trained {t.iterations} iterations on {len(videos)} videos: "
          f"loss {res.initial_full_loss:.4f} -> {res.final_full_loss:.4f}")


def cmd_propose(cfg: RunConfig, jobs: int = 1) -> None:
    store = _load_params(cfg.params_path, "train")
    anns = _annotations(cfg)
    videos = _load_inputs(cfg, anns)
    e = cfg.eval
    chunks = [list(range(s, min(s + 16, len(anns)))) for s in range(0, len(anns), 16)]

    def one(idx):
        return propose(
            store, [videos[i] for i in idx], [anns[i].duration_s for i in idx], [anns[i].video_id for i in idx],
            e.an_max, e.sigma_nms, e.score_floor,
        )

    sets = [ps for part in _pmap(one, chunks, jobs) for ps in part]
    out = dataio.ensure_dir(cfg.out / "propose")
    write_proposals(sets, out / "proposals.jsonl")
    if e.dump_maps:
        maps_dir = dataio.ensure_dir(out / "maps")
        for ann, (ps, pe, pa) in zip(anns, predict(store, videos)):
            dataio.write_arrays({"P_S": ps, "P_E": pe, "P_A": pa}, maps_dir / f"{ann.video_id}.pmrf")
    print(f"{sum(len(s) for s in sets)} proposals for {len(sets)} videos -> {out}")


def _paragraphs(cfg: RunConfig, anns) -> list:
    if cfg.paths.captions:
        by_id = {}
        for line in _require(Path(cfg.paths.captions), None).read_text(encoding="utf-8").splitlines():
            if line.strip():
                obj = json.loads(line)
                by_id[obj["video_id"]] = obj["paragraph"]
        return [by_id[a.video_id] for a in anns if a.video_id in by_id]
    return [a.captions for a in anns if a.captions]


def cmd_eval(cfg: RunConfig, jobs: int = 1) -> None:
    anns = _annotations(cfg)
    if cfg.eval.split == "holdout" and cfg.train.holdout > 0:
        _, anns = _split(cfg, anns)
    props = read_proposals(_require(cfg.out / "propose" / "proposals.jsonl", "propose"))
    wanted = {a.video_id for a in anns}
    report = ar_at_an({k: v for k, v in props.items() if k in wanted}, anns, cfg.eval.thresholds, cfg.eval.an_max)
    paragraphs = _paragraphs(cfg, anns)
    if paragraphs:
        report.div2 = diversity_div_n(paragraphs, 2)
        report.r4 = repetition_r_n(paragraphs, 4)
    out = dataio.ensure_dir(cfg.out / "eval")
    export_curve(report, out / "curve.csv", out / "summary.txt")
    print((out / "summary.txt").read_text(), end="")


HELP = {
    "gen": "write the synthetic dataset",
    "encode": "cache beholder inputs and snippet features per video",
    "labels": "write boundary and duration labels per video",
    "train": "train encoder + head with Adam, write params and loss log",
    "propose": "score, soft-NMS and export proposals",
    "eval": "AR@AN curve, AUC, Div@2 and R@4",
}

COMMANDS = {
    "gen": cmd_gen,
    "encode": cmd_encode,
    "labels": cmd_labels,
    "train": cmd_train,
    "propose": cmd_propose,
    "eval": cmd_eval,
}

STAGES = tuple(COMMANDS)


def cmd_pipeline(cfg: RunConfig, stage: str, jobs: int = 1) -> None:
    COMMANDS[stage](cfg, jobs)


# --------------------------------------------------------------------------
# entry point


def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="flat dotted-key YAML file (else $PMR_CONFIG)")
    p.add_argument("--out", default=default, help="output directory (paths.out)")
    p.add_argument("--seed", type=int, default=default, help="override train.seed")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1, help="video-level parallelism")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS if suppress else [], metavar="KEY=VALUE",
                   help="override any config key, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmr", description="PMR proposal pipeline on desk-scale data")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        sp = sub.add_parser(name, help=HELP[name])
        _common(sp, suppress=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"config error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        overrides[key.strip()] = value
    if args.out is not None:
        overrides["paths.out"] = args.out
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    try:
        cfg = load_config(args.config, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
        cmd_pipeline(cfg, args.stage, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
