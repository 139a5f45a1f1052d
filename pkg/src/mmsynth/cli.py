"""Operator command line: synthesis, shard auditing, statistics, hard-negative
mining, retrieval evaluation, and the data-scaling fit.

Data goes to stdout (or --out files); logs go to stderr. Exit codes: 0 on
success, 1 for run-level failures, 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import evalkit, pipeline
from .client import EndpointConfig
from .errors import MmsynthError
from .images import load_embeddings_any
from .sampling import default_distribution, load_distribution
from .validation import check_sample
from .writer import compute_stats, iter_shard_samples

logger = logging.getLogger("mmsynth")

ENV_API_KEY = "MMSYNTH_API_KEY"
ENV_API_BASE = "MMSYNTH_API_BASE"


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.handler(args)
    except MmsynthError as e:
        logger.error("%s", e)
        return 1
    except (OSError, ValueError) as e:
        logger.error("%s", e)
        return 1
    _emit(result, args.format)
    return 0 if result.get("ok", True) else 1


def _emit(result: dict, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(result, indent=2, ensure_ascii=False))
    else:
        for key, value in result.items():
            if isinstance(value, dict):
                print(f"{key}:")
                for k, v in value.items():
                    print(f"  {k}: {v}")
            else:
                print(f"{key}: {value}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmsynth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a sharded dataset")
    p.add_argument("--config", help="run config file (JSON or YAML)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--mock", action="store_true", help="use the offline deterministic generator")
    p.add_argument("--concurrency", type=int, help="worker count")
    p.add_argument("--corpus", help="image manifest path")
    p.add_argument("--embeddings", help="embedding directory (ids.txt/vecs.f32/meta)")
    p.add_argument("--shard-size", type=int, help="samples per shard")
    _add_format(p)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("validate", help="re-check invariants over existing shards")
    p.add_argument("--in", dest="in_dir", required=True)
    _add_format(p)
    p.set_defaults(handler=_cmd_validate)

    p = sub.add_parser("stats", help="recompute dataset statistics from shards")
    p.add_argument("--in", dest="in_dir", required=True)
    _add_format(p)
    p.set_defaults(handler=_cmd_stats)

    p = sub.add_parser("mine", help="pick a hard negative from a ranking file")
    p.add_argument("--ranking", required=True, help="file with one doc id per line, best first")
    p.add_argument("--positive", required=True)
    p.add_argument("--rank", type=int, default=70)
    _add_format(p)
    p.set_defaults(handler=_cmd_mine)

    p = sub.add_parser("eval", help="retrieval metrics over embedding files")
    p.add_argument("--queries", required=True,
                   help="query embeddings: binary directory or {id, vec} record file")
    p.add_argument("--docs", required=True,
                   help="doc embeddings: binary directory or {id, vec} record file")
    p.add_argument("--gold", required=True, help="file of 'query_id doc_id' lines")
    p.add_argument("--metric", choices=["p@1", "r@k"], required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--tau", type=float, help="temperature for --loss")
    p.add_argument("--loss", action="store_true", help="also report mean contrastive loss")
    _add_format(p)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("fit-scaling", help="linear-log fit over (count, score) points")
    p.add_argument("--points", required=True, help="file of '<n> <y>' lines")
    _add_format(p)
    p.set_defaults(handler=_cmd_fit)

    return parser


def _add_format(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=["human", "json"], default="human")


def _load_run_tree(path: str | None) -> dict:
    if path is None:
        return {}
    from .sampling import _load_tree  # same loader, same error style

    tree = _load_tree(path)
    if not isinstance(tree, dict):
        raise MmsynthError(f"{path}: run config must be a mapping")
    return tree


def _cmd_synth(args: argparse.Namespace) -> dict:
    tree = _load_run_tree(args.config)

    # Paths from the config file resolve against its workspace root (the file's
    # directory unless the file declares one); flag paths resolve against cwd.
    default_root = Path(args.config).parent if args.config else Path(".")
    root = Path(tree.get("workspace_root", default_root))

    distribution = default_distribution()
    if "distribution" in tree:
        distribution = load_distribution(root / tree["distribution"])

    def pick(flag_value, key, default=None):
        if flag_value is not None:
            return flag_value
        return tree.get(key, default)

    def pick_path(flag_value, key):
        if flag_value is not None:
            return flag_value
        if key in tree:
            return str(root / tree[key])
        return None

    use_mock = bool(args.mock or tree.get("mock", False))
    endpoint = None
    if not use_mock:
        ep = dict(tree.get("endpoint", {}))
        base_url = os.environ.get(ENV_API_BASE, ep.get("base_url", ""))
        api_key = os.environ.get(ENV_API_KEY, "")
        if not base_url:
            raise MmsynthError(
                f"no endpoint configured: set {ENV_API_BASE} or endpoint.base_url, or pass --mock"
            )
        endpoint = EndpointConfig(
            base_url=base_url,
            api_key=api_key,
            model_name=ep.get("model_name", "gpt-4o-2024-08-06"),
            max_concurrency=int(ep.get("max_concurrency", 8)),
            max_retries=int(ep.get("max_retries", 5)),
            request_timeout=float(ep.get("request_timeout", 120.0)),
        )

    spec = pipeline.RunSpec(
        master_seed=int(pick(args.seed, "master_seed", 0)),
        n_samples=int(pick(args.n, "n_samples", 0) or 0),
        corpus_manifest=pick_path(args.corpus, "corpus_manifest"),
        embeddings_dir=pick_path(args.embeddings, "embeddings_dir"),
        out_dir=pick_path(args.out, "out_dir"),
        shard_size=int(pick(args.shard_size, "shard_size", 1000)),
        distribution=distribution,
        use_mock=use_mock,
        endpoint=endpoint,
        max_concurrency=int(pick(args.concurrency, "max_concurrency", 8)),
        regenerate_on_reject=bool(tree.get("regenerate_on_reject", False)),
    )
    if spec.corpus_manifest is None or spec.embeddings_dir is None or spec.out_dir is None:
        raise MmsynthError("corpus, embeddings, and out dir are required (flags or config file)")

    report = pipeline.run(spec)
    logger.info(
        "synthesized %d samples (%d rejected, %d failed) in %.1fs",
        report.accepted, report.rejected, report.transport_failures, report.wall_time,
    )
    return report.to_dict()


def _cmd_validate(args: argparse.Namespace) -> dict:
    total = 0
    bad = 0
    by_rule: dict[str, int] = {}
    for sample in iter_shard_samples(args.in_dir):
        total += 1
        problems = check_sample(sample)
        if problems:
            bad += 1
            for rule, message in problems:
                by_rule[rule] = by_rule.get(rule, 0) + 1
                logger.warning("%s: %s: %s", sample.id, rule, message)
    return {
        "ok": bad == 0,
        "samples": total,
        "violating_samples": bad,
        "violations_by_rule": by_rule,
    }


def _cmd_stats(args: argparse.Namespace) -> dict:
    return compute_stats(iter_shard_samples(args.in_dir)).to_dict()


def _cmd_mine(args: argparse.Namespace) -> dict:
    ranking = [
        line.strip()
        for line in Path(args.ranking).read_text("utf-8").splitlines()
        if line.strip()
    ]
    negative = evalkit.mine_hard_negative(ranking, args.positive, args.rank)
    return {"hard_negative": negative, "rank": args.rank}


def _load_gold(path: str) -> dict[str, set[str]]:
    gold: dict[str, set[str]] = {}
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MmsynthError(f"{path}:{lineno}: expected 'query_id doc_id'")
        gold.setdefault(parts[0], set()).add(parts[1])
    if not gold:
        raise MmsynthError(f"{path}: no gold pairs")
    return gold


def _cmd_eval(args: argparse.Namespace) -> dict:
    inputs = evalkit.EvalInputs(
        query_vecs=load_embeddings_any(args.queries),
        doc_vecs=load_embeddings_any(args.docs),
        gold=_load_gold(args.gold),
    )
    scores = inputs.score_matrix()
    gold_idx = inputs.gold_indices()
    result: dict = {"queries": len(gold_idx)}
    if args.metric == "p@1":
        result["precision_at_1"] = evalkit.precision_at_1(scores, gold_idx)
    else:
        result[f"recall_at_{args.k}"] = evalkit.recall_at_k(scores, gold_idx, args.k)
    if args.loss:
        if args.tau is None:
            raise MmsynthError("--loss requires --tau (the temperature has no default)")
        result["mean_info_nce"] = _mean_loss(scores, gold_idx, args.tau)
        result["tau"] = args.tau
    return result


def _mean_loss(scores, gold_idx: dict[int, set[int]], tau: float) -> float:
    """Mean loss per query: first gold doc as positive, all non-gold as negatives."""
    params = evalkit.LossParams(tau=tau)
    losses = []
    for qi, docs in gold_idx.items():
        pos = min(docs)
        negs = [scores[qi][d] for d in range(scores.shape[1]) if d not in docs]
        losses.append(evalkit.info_nce_from_cosines(scores[qi][pos], negs, params))
    return sum(losses) / len(losses)


def _cmd_fit(args: argparse.Namespace) -> dict:
    points = []
    for lineno, line in enumerate(Path(args.points).read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MmsynthError(f"{args.points}:{lineno}: expected '<n> <y>'")
        points.append((float(parts[0]), float(parts[1])))
    return evalkit.fit_linear_log(points)


if __name__ == "__main__":
    sys.exit(main())
