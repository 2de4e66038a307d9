"""Command-line entry points: gen-env, train, eval, infer, diag.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import InputError, KeyframeError
from .policy import load_checkpoint
from .synthetic_env import SyntheticSpec, episode_seed_for, generate_episode, read_episodes, write_episodes
from .trainer import TrainConfig, cib_diagnostics, evaluate, heldout_set, infer, make_oracle, train

log = logging.getLogger("causal_keyframe")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

# flag name -> TrainConfig field
_OVERRIDES = {
    "seed": "master_seed",
    "epochs": "epochs",
    "oracle": "oracle",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "groups": "groups",
    "k": "k",
    "m": "m",
    "lr": "learning_rate",
}


def _read_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p}: no such file")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise InputError(f"{p}: expected a JSON object")
    return obj


def load_config(path: Optional[str], args: Optional[argparse.Namespace] = None) -> TrainConfig:
    """Config file plus any command-line overrides that were given."""
    obj = _read_json(path)
    if args is not None:
        for flag, name in _OVERRIDES.items():
            value = getattr(args, flag, None)
            if value is not None:
                obj[name] = value
    if args is not None and getattr(args, "seed", None) is not None:
        env = dict(obj.get("env") or {})
        env["master_seed"] = args.seed
        obj["env"] = env
    return TrainConfig.from_json(obj)


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--oracle", choices=["synthetic", "http"])
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--groups", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--lr", type=float)


def cmd_gen_env(args) -> int:
    obj = _read_json(args.spec)
    if args.seed is not None:
        obj["master_seed"] = args.seed
    spec = SyntheticSpec.from_json(obj)
    episodes = (generate_episode(spec, episode_seed_for(spec, args.split, n)) for n in range(args.count))
    write_episodes(episodes, args.out)
    print(f"wrote {args.count} episodes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config, args)
    result = train(config, args.run_dir, resume=args.resume, stop_after=args.stop_after)
    print(json.dumps(result.summary(), sort_keys=True))
    return EXIT_OK


def _config_for_checkpoint(args) -> TrainConfig:
    path = args.config
    if path is None and args.checkpoint:
        sibling = Path(args.checkpoint).parent / "config.json"
        path = str(sibling) if sibling.exists() else None
    return load_config(path, args)


def _load_params(args, needed: bool):
    if args.checkpoint is None:
        if needed:
            raise InputError("--checkpoint is required for the policy strategy")
        return None
    if not Path(args.checkpoint).exists():
        raise InputError(f"{args.checkpoint}: checkpoint not found")
    return load_checkpoint(args.checkpoint)


def _episodes(args, config: TrainConfig):
    if args.dataset:
        if not Path(args.dataset).exists():
            raise InputError(f"{args.dataset}: no such file")
        return list(read_episodes(args.dataset))
    return heldout_set(config.env, args.instances)


def cmd_eval(args) -> int:
    config = _config_for_checkpoint(args)
    params = _load_params(args, needed=args.baseline == "policy")
    episodes = _episodes(args, config)
    metrics = evaluate(params, episodes, config.k, make_oracle(config), config.m, config.detection_threshold, args.baseline)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_infer(args) -> int:
    config = _config_for_checkpoint(args)
    params = _load_params(args, needed=args.baseline == "policy")
    episodes = _episodes(args, config)
    if not 0 <= args.index < len(episodes):
        raise InputError(f"instance index {args.index} out of range (have {len(episodes)})")
    res = infer(params, episodes[args.index], config.k, make_oracle(config), config.m, config.detection_threshold, args.baseline)
    print(json.dumps({"episode_id": episodes[args.index].episode_id, "frames": list(res.frames), "answer": res.answer_text}))
    return EXIT_OK


DIAG_COLUMNS = ["episode", "J1_hat", "J2_hat", "mean_reward", "grad_norm"]


def diag_rows(log_path: str | Path) -> tuple[list[dict], list[tuple], int]:
    """Per-episode diagnostic rows, sigma traces and the number of skipped lines."""
    rows, traces, skipped = [], [], 0
    with open(log_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                members = rec["members"]
                step = rec["step"]
                if not members:
                    continue
                d = cib_diagnostics([rec])
                mean_r = sum(m["rewards"]["total"] for m in members) / len(members)
                sigma = rec["sigma"]
                pool = rec["pool_frames"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                log.warning("%s:%d: skipping corrupt record (%s)", log_path, lineno, exc)
                skipped += 1
                continue
            rows.append(
                {"episode": step, "J1_hat": d["j1_hat"], "J2_hat": d["j2_hat"], "mean_reward": mean_r, "grad_norm": rec.get("grad_norm")}
            )
            traces.extend((step, pos, frame, s) for pos, (frame, s) in enumerate(zip(pool, sigma)))
    return rows, traces, skipped


def cmd_diag(args) -> int:
    if not Path(args.log).exists():
        raise InputError(f"{args.log}: no such file")
    rows, traces, skipped = diag_rows(args.log)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=DIAG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    if args.sigma_out:
        with open(args.sigma_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "position", "frame", "sigma"])
            writer.writerows(traces)
    if skipped:
        print(f"skipped {skipped} corrupt log line(s)", file=sys.stderr)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causal-keyframe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-env", help="write synthetic episodes as JSONL")
    p.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("train", help="train a selection policy")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-after", type=int)
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a selection strategy"), ("infer", cmd_infer, "select frames for one instance")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint")
        p.add_argument("--config", help="defaults to config.json next to the checkpoint")
        p.add_argument("--dataset", help="episode JSONL; defaults to generated held-out instances")
        p.add_argument("--instances", type=int, default=200)
        p.add_argument("--baseline", choices=["policy", "uniform", "visual"], default="policy")
        _add_overrides(p)
        if name == "eval":
            p.add_argument("--out")
        else:
            p.add_argument("--index", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("diag", help="export diagnostics from an episode log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma-out")
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (KeyframeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
