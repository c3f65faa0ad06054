"""Command line interface: ``vera train|score|eval|sweep|plot|explain|import-ucf``.

Commands that talk to models read a flat YAML key-value config file; any key
can be overridden with ``--set key=value``. Frames must already be extracted
to image files addressed by each record's ``frame_source`` template, e.g.
``/data/frames/{id}/{index:06d}.jpg`` (``ffmpeg -i video.mp4 %06d.jpg``
produces this layout). Set ``sim_world`` (or pass ``--sim-world``) to run
against the deterministic simulated backends instead of HTTP servers.

Exit status: 0 on success, 1 on operational errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .evaluator import aggregate, evaluate_arrays
from .gateway import HTTPEmbeddingBackend, OpenAIChatBackend, load_frames
from .manifest import (
    expand_labels,
    import_ucf_annotations,
    load_manifest,
    read_question_set,
    read_scores,
    write_manifest,
    write_question_set,
    write_scores,
)
from .plotting import write_score_svg
from .prompting import (
    ParseFailure,
    load_learner_template,
    load_optimizer_template,
    load_preset_questions,
    parse_binary_verdict,
    parse_explanation,
    render_learner_prompt,
)
from .gateway import ChatRequest
from .sampler import plan_segments
from .scorer import ScoreConfig, VideoAborted, initial_scores, refine_scores, segment_embeddings
from .simulation import SimChatBackend, SimEmbeddingBackend, load_sim_world
from .trainer import TrainConfig, run_training

logger = logging.getLogger("vera")

SWEEP_PARAMS = {
    "k_ratio": "k_ratio",
    "K_ratio": "k_ratio",
    "kernel_size": "kernel_size",
    "omega": "kernel_size",
    "sigma1": "sigma1",
    "sigma_1": "sigma1",
    "tau": "tau",
    "sigma2_ratio": "sigma2_ratio",
    "sigma_2_ratio": "sigma2_ratio",
}

PATH_KEYS = ("manifest", "test_manifest", "questions", "learner_template", "optimizer_template", "sim_world", "out")
OTHER_KEYS = ("chat_url", "chat_key", "chat_model", "embed_url", "parallelism")


class UsageError(Exception):
    pass


class CommandError(Exception):
    pass


@dataclass
class RunConfig:
    train: TrainConfig
    score: ScoreConfig
    manifest: Optional[Path] = None
    test_manifest: Optional[Path] = None
    questions: Optional[Path] = None
    learner_template: Optional[Path] = None
    optimizer_template: Optional[Path] = None
    sim_world: Optional[Path] = None
    out: Path = Path("vera_out")
    chat_url: Optional[str] = None
    chat_key: Optional[str] = None
    chat_model: str = "InternVL2-8B"
    embed_url: Optional[str] = None
    parallelism: int = 4

    @property
    def scoring_manifest(self) -> Optional[Path]:
        return self.test_manifest or self.manifest


def _parse_override(text: str):
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def load_run_config(path, overrides=(), sim_world=None) -> RunConfig:
    """Read, merge and validate a run configuration before any backend is built."""
    path = Path(path)
    if not path.exists():
        raise CommandError(f"config not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise CommandError(f"{path}: expected a flat key-value mapping")
    for item in overrides:
        k, v = _parse_override(item)
        raw[k] = v
    if sim_world:
        raw["sim_world"] = str(sim_world)
    train_keys = {f.name for f in fields(TrainConfig)}
    score_keys = {f.name for f in fields(ScoreConfig)}
    unknown = set(raw) - train_keys - score_keys - set(PATH_KEYS) - set(OTHER_KEYS)
    if unknown:
        raise CommandError(f"unknown config keys: {sorted(unknown)}")
    try:
        train = TrainConfig(**{k: raw[k] for k in train_keys if k in raw})
        score = ScoreConfig(**{k: raw[k] for k in score_keys if k in raw})
    except (TypeError, ValueError) as exc:
        raise CommandError(f"invalid config: {exc}") from None
    base = path.parent
    paths = {}
    for key in PATH_KEYS:
        if raw.get(key) is None:
            continue
        p = Path(str(raw[key]))
        p = p if p.is_absolute() else base / p
        if key != "out" and not p.exists():
            what = "manifest" if "manifest" in key else key.replace("_", " ")
            raise CommandError(f"{what} not found: {p}")
        paths[key] = p
    rc = RunConfig(train=train, score=score, **paths)
    for key in OTHER_KEYS:
        if raw.get(key) is not None:
            setattr(rc, key, raw[key])
    return rc


def make_backends(rc: RunConfig):
    if rc.sim_world:
        world = load_sim_world(rc.sim_world)
        return (
            SimChatBackend(world, parallelism=rc.parallelism, max_images=rc.train.image_limit),
            SimEmbeddingBackend(world, parallelism=rc.parallelism),
        )
    chat = OpenAIChatBackend(
        rc.chat_url, model=rc.chat_model, api_key=rc.chat_key, parallelism=rc.parallelism, max_images=rc.train.image_limit
    )
    embedder = HTTPEmbeddingBackend(rc.embed_url, parallelism=rc.parallelism)
    return chat, embedder


def _questions(rc: RunConfig, override=None):
    path = override or rc.questions
    if path is None:
        return load_preset_questions("ucf_crime")
    if str(path) in ("initial", "ucf_crime"):
        return load_preset_questions(str(path))
    return read_question_set(path)


# ---------------------------------------------------------------------------
# Step-1 cache
# ---------------------------------------------------------------------------


def _cache_key(record, q, cfg: ScoreConfig) -> str:
    blob = json.dumps(
        [record.id, list(q.questions), cfg.d, cfg.window_seconds, cfg.per_window], sort_keys=True
    ).encode()
    return f"{record.id}-{hashlib.sha256(blob).hexdigest()[:16]}"


def step1_cached(record, q, cfg, chat, embedder, template, cache_dir: Path):
    """Segment verdicts, explanations and embeddings, computed once per key."""
    cache_file = cache_dir / f"{_cache_key(record, q, cfg)}.json"
    plan = plan_segments(record, cfg.d, cfg.window_seconds, cfg.per_window)
    if cache_file.exists():
        obj = json.loads(cache_file.read_text(encoding="utf-8"))
        return plan, np.array(obj["initial"]), obj["explanations"], obj["failed"], np.array(obj["embeddings"])
    initial, explanations, failed = initial_scores(record, q, cfg, chat, template, plan)
    emb = segment_embeddings(record, plan, embedder)
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache_file.write_text(
        json.dumps(
            {
                "initial": initial.tolist(),
                "explanations": explanations,
                "failed": failed,
                "embeddings": emb.tolist(),
            }
        ),
        encoding="utf-8",
    )
    return plan, initial, explanations, failed, emb


def write_segment_details(path: Path, plan, initial, ensembled, smoothed, explanations) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "center", "window_start", "window_end", "initial", "ensembled", "smoothed", "explanation"])
        for u in range(plan.segment_count):
            lo, hi = plan.windows[u]
            w.writerow(
                [u + 1, plan.centers[u], lo, hi, int(initial[u]), repr(float(ensembled[u])),
                 repr(float(smoothed[u])), explanations[u] if explanations else ""]
            )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.set, args.sim_world)
    if rc.manifest is None:
        raise CommandError("config has no 'manifest' entry")
    out = Path(args.out) if args.out else rc.out
    manifest = load_manifest(rc.manifest)
    chat, _ = make_backends(rc)
    q0 = _questions(rc, args.questions) if (args.questions or rc.questions) else load_preset_questions("initial")
    out.mkdir(parents=True, exist_ok=True)
    best, state = run_training(
        manifest,
        rc.train,
        chat,
        load_learner_template(rc.learner_template),
        load_optimizer_template(rc.optimizer_template),
        q0,
        checkpoint_path=out / "checkpoint.json",
        log_path=out / "train_log.jsonl",
        resume=args.resume,
    )
    write_question_set(best, out / "questions.json")
    initial_acc = state.history[0][1] if state.history else float("nan")
    print(f"iterations: {state.iterations_done}")
    print(f"initial validation accuracy: {initial_acc:.4f}")
    print(f"best validation accuracy: {state.best_acc:.4f} (iteration {best.iteration})")
    print(f"questions written to {out / 'questions.json'}")
    return 0


def _select_videos(manifest, video_arg):
    if not video_arg:
        return list(manifest.videos)
    ids = [v for v in video_arg.split(",") if v]
    known = {v.id for v in manifest.videos}
    unknown = [i for i in ids if i not in known]
    if unknown:
        raise CommandError(f"unknown video ids: {', '.join(unknown)}")
    return [manifest.get(i) for i in ids]


def cmd_score(args) -> int:
    rc = load_run_config(args.config, args.set, args.sim_world)
    if rc.scoring_manifest is None:
        raise CommandError("config has no 'manifest' or 'test_manifest' entry")
    manifest = load_manifest(rc.scoring_manifest)
    videos = _select_videos(manifest, args.videos)
    q = _questions(rc, args.questions)
    out = Path(args.out) if args.out else rc.out
    chat, embedder = make_backends(rc)
    template = load_learner_template(rc.learner_template)
    aborted = []
    for record in videos:
        try:
            plan, initial, expl, failed, emb = step1_cached(
                record, q, rc.score, chat, embedder, template, out / "cache"
            )
        except VideoAborted as exc:
            logger.error("%s", exc)
            aborted.append(record.id)
            continue
        frames, ens, smooth = refine_scores(initial, emb, plan, record.frame_count, rc.score)
        write_scores(frames, out / "scores" / f"{record.id}.csv")
        write_segment_details(out / "segments" / f"{record.id}.csv", plan, initial, ens, smooth, expl)
    print(f"scored {len(videos) - len(aborted)} of {len(videos)} videos into {out / 'scores'}")
    if aborted:
        print(f"aborted: {', '.join(aborted)}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    scores_dir = Path(args.scores_dir)
    if not scores_dir.is_dir() or not any(scores_dir.glob("*.csv")):
        raise CommandError(f"no score files in {scores_dir}")
    report = aggregate(manifest, scores_dir)
    print(report.summary())
    for vid, (auc, ap) in report.per_video.items():
        print(f"  {vid}: AUC {auc * 100:.4f}  AP {ap * 100:.4f}")
    out = Path(args.out) if args.out else scores_dir.parent / "metrics.json"
    report.write(out)
    print(f"report written to {out}")
    return 0


def _parse_values(param, text):
    try:
        vals = [yaml.safe_load(v) for v in text.split(",") if v.strip()]
        if param == "kernel_size":
            return [int(v) for v in vals]
        return [float(v) for v in vals]
    except (TypeError, ValueError):
        raise UsageError(f"could not parse values {text!r}") from None


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep parameter {args.param!r}; valid names: {', '.join(sorted(set(SWEEP_PARAMS.values())))}")
    param = SWEEP_PARAMS[args.param]
    values = _parse_values(param, args.values)
    if not values:
        raise UsageError("no sweep values given")
    rc = load_run_config(args.config, args.set, args.sim_world)
    if rc.scoring_manifest is None:
        raise CommandError("config has no 'manifest' or 'test_manifest' entry")
    manifest = load_manifest(rc.scoring_manifest)
    q = _questions(rc, args.questions)
    out = Path(args.out) if args.out else rc.out
    chat, embedder = make_backends(rc)
    template = load_learner_template(rc.learner_template)
    cached = {}
    for record in manifest.videos:
        plan, initial, _, _, emb = step1_cached(record, q, rc.score, chat, embedder, template, out / "cache")
        cached[record.id] = (plan, initial, emb)
    labels = {v.id: expand_labels(v).labels for v in manifest.videos}
    rows = []
    for value in values:
        try:
            cfg = replace(rc.score, **{param: value})
        except ValueError as exc:
            raise CommandError(f"invalid {param}={value}: {exc}") from None
        scores = {
            v.id: refine_scores(cached[v.id][1], cached[v.id][2], cached[v.id][0], v.frame_count, cfg)[0]
            for v in manifest.videos
        }
        report = evaluate_arrays(scores, labels)
        rows.append((value, report.auc, report.ap))
    table = out / f"sweep_{param}.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    with table.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([param, "auc", "ap"])
        for value, auc, ap in rows:
            w.writerow([value, repr(auc), repr(ap)])
    print(f"{param:>12}  {'AUC':>8}  {'AP':>8}")
    for value, auc, ap in rows:
        print(f"{value:>12g}  {auc * 100:8.4f}  {ap * 100:8.4f}")
    print(f"table written to {table}")
    return 0


def cmd_plot(args) -> int:
    manifest = load_manifest(args.manifest)
    try:
        record = manifest.get(args.video_id)
    except KeyError:
        raise CommandError(f"video {args.video_id!r} not in manifest") from None
    if not Path(args.score_file).exists():
        raise CommandError(f"score file not found: {args.score_file}")
    scores = read_scores(args.score_file)
    if scores.size == 0:
        raise CommandError("score file holds no frames")
    out = Path(args.out) if args.out else Path(args.score_file).with_suffix(".svg")
    write_score_svg(out, scores, record.gt_intervals or (), title=record.id)
    print(f"plot written to {out}")
    return 0


def cmd_explain(args) -> int:
    rc = load_run_config(args.config, args.set, args.sim_world)
    if rc.scoring_manifest is None:
        raise CommandError("config has no 'manifest' or 'test_manifest' entry")
    manifest = load_manifest(rc.scoring_manifest)
    try:
        record = manifest.get(args.video_id)
    except KeyError:
        raise CommandError(f"video {args.video_id!r} not in manifest") from None
    plan = plan_segments(record, rc.score.d, rc.score.window_seconds, rc.score.per_window)
    u = args.segment_index
    if not 1 <= u <= plan.segment_count:
        raise CommandError(f"segment index {u} out of range 1..{plan.segment_count}")
    q = _questions(rc, args.questions)
    chat, _ = make_backends(rc)
    images = load_frames(record, plan.window_samples[u - 1])
    prompt = render_learner_prompt(load_learner_template(rc.learner_template), q, len(images), explain=True)
    reply = chat.chat(ChatRequest(prompt, tuple(images), temperature=0.0))
    try:
        verdict = parse_binary_verdict(reply)
    except ParseFailure:
        raise CommandError(f"model reply had no verdict: {reply!r}") from None
    lo, hi = plan.windows[u - 1]
    print(f"segment {u} (frames {lo}-{hi}): verdict {verdict}")
    print(parse_explanation(reply) or reply.strip())
    return 0


def _read_frame_counts(path) -> dict:
    counts = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if len(parts) >= 2:
            counts[parts[0]] = int(parts[1])
    return counts


def cmd_import_ucf(args) -> int:
    counts = _read_frame_counts(args.frame_counts) if args.frame_counts else None
    manifest = import_ucf_annotations(
        args.annotations, args.fps, frame_counts=counts, frame_source=args.frame_source, split=args.split
    )
    write_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} videos to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vera", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="flat YAML key-value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--sim-world", help="use simulated backends from this world file")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        return p

    p = with_config(sub.add_parser("train", help="learn guiding questions"))
    p.add_argument("--questions", help="initial question-set file (default: shipped two-question preset)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("score", help="compute frame-level anomaly scores"))
    p.add_argument("--questions", help="question-set file, or 'ucf_crime' / 'initial' preset")
    p.add_argument("--videos", help="comma-separated subset of video ids")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="frame-level AUC and AP over a scored manifest")
    p.add_argument("manifest")
    p.add_argument("scores_dir")
    p.add_argument("--out", help="metric report path (default: <scores_dir>/../metrics.json)")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("sweep", help="re-run the numeric steps over parameter values"))
    p.add_argument("--param", required=True, help="k_ratio, kernel_size, sigma1, tau or sigma2_ratio")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--questions")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="SVG chart of one video's scores")
    p.add_argument("score_file")
    p.add_argument("manifest")
    p.add_argument("video_id")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = with_config(sub.add_parser("explain", help="verdict and one-sentence explanation for one segment"))
    p.add_argument("--questions")
    p.add_argument("video_id")
    p.add_argument("segment_index", type=int, help="1-based segment index")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("import-ucf", help="convert a UCF-Crime temporal annotation file to a manifest")
    p.add_argument("annotations")
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--frame-source", default="", help="frame path template, e.g. /frames/{id}/{index:06d}.jpg")
    p.add_argument("--frame-counts", help="file with lines '<video id> <frame count>'")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_import_ucf)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vera {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, FileNotFoundError, ValueError, RuntimeError, KeyError) as exc:
        print(f"vera {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
