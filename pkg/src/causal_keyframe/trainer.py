"""Group-wise policy-gradient training of the selection policy, and inference.

One optimizer step per video-question pair: G subsets are sampled from the
policy, each paired with a counterfactual subset drawn from the inverted
policy, scored by the composite reward, and mean-centered into advantages.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, InputError, NumericalError
from .oracles.base import Oracle, OracleError, OracleRequest, RequestKind
from .policy import (
    PolicyOutput,
    PolicyParams,
    backward,
    init_policy,
    load_checkpoint,
    log_prob_logit_grad,
    policy_forward,
    save_checkpoint,
)
from .pool import CandidatePool, extract_target_elements, pool_for_episode, uniform_indices
from .records import Episode
from .rewards import (
    RewardBreakdown,
    answer_reward,
    composite_reward,
    counterfactual_reward,
    cycle_reward,
    parse_option,
)
from .sampling import Selection, SelectionKind, rng_for, sample_counterfactual, sample_subset, top_k_select
from .synthetic_env import SyntheticSpec, episode_seed_for, generate_episode, read_episodes

log = logging.getLogger(__name__)

LOG_SCHEMA_VERSION = 1

# rng purposes
_SAMPLE, _COUNTERFACTUAL, _SHUFFLE = 0, 1, 2


@dataclass
class HttpSettings:
    base_url: str = "http://127.0.0.1:8000/v1"
    model: str = "gpt-4o"
    api_key: Optional[str] = None
    timeout_s: float = 60.0
    max_retries: int = 2
    backoff_s: float = 0.5
    max_in_flight: Optional[int] = None
    min_interval_s: float = 0.0
    top_logprobs: int = 20
    templates_dir: Optional[str] = None


@dataclass
class TrainConfig:
    m: int = 32
    k: int = 8
    groups: int = 4
    lambda1: float = 0.5
    lambda2: float = 0.5
    learning_rate: float = 1e-4
    epochs: int = 3
    master_seed: int = 0
    policy_seed: Optional[int] = None
    hidden: int = 128
    layers: int = 3
    detection_threshold: float = 0.7
    r_cf_cap: Optional[float] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 100
    oracle: str = "synthetic"
    env: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(total_frames=64, pool_target=32))
    train_instances: int = 400
    dataset: Optional[str] = None
    max_workers: int = 1
    shared_counterfactual: bool = False
    skip_degenerate: bool = True
    http: HttpSettings = field(default_factory=HttpSettings)

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = SyntheticSpec.from_json(self.env)
        if isinstance(self.http, dict):
            unknown = set(self.http) - {f.name for f in fields(HttpSettings)}
            if unknown:
                raise ConfigError(f"unknown http fields: {sorted(unknown)}")
            self.http = HttpSettings(**self.http)
        self.validate()

    def validate(self) -> None:
        if self.m < 1 or self.k < 1:
            raise ConfigError("m and k must be >= 1")
        if self.k > self.m:
            raise ConfigError(f"k ({self.k}) must not exceed m ({self.m})")
        if self.groups < 2:
            raise ConfigError(f"groups must be >= 2, got {self.groups}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("reward weights must be >= 0")
        if self.epochs < 0 or self.train_instances < 0:
            raise ConfigError("epochs and train_instances must be >= 0")
        if not 0.0 <= self.detection_threshold <= 1.0:
            raise ConfigError("detection_threshold must be in [0, 1]")
        if self.oracle not in ("synthetic", "http"):
            raise ConfigError(f"unknown oracle backend {self.oracle!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.env.feature_dim

    def to_json(self) -> dict:
        out = asdict(self)
        out["env"] = self.env.to_json()
        out["http"].pop("api_key", None)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with bias correction; moments kept in float64."""

    def __init__(self, params: PolicyParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: PolicyParams, grad: PolicyParams, lr: float, mask: Optional[PolicyParams] = None) -> None:
        """Descend along ``grad`` (a loss gradient); ``mask`` zeros frozen entries."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grad[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if mask is not None:
                update = update * mask[name]
            p[...] = (p.astype(np.float64) - update).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(self.t)}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays) -> None:
        self.t = int(arrays["adam.t"])
        for name in self.m:
            self.m.arrays[name] = np.array(arrays[f"adam.m.{name}"], dtype=np.float64)
            self.v.arrays[name] = np.array(arrays[f"adam.v.{name}"], dtype=np.float64)


# -- one episode ----------------------------------------------------------------


def compute_advantages(rewards: Sequence[float]) -> list[float]:
    """Rewards minus their group mean (no std normalization)."""
    if len(rewards) < 2:
        raise InputError("a group needs at least two rewards")
    r = np.asarray(rewards, dtype=np.float64)
    return (r - r.mean()).tolist()


@dataclass
class MemberRecord:
    selection: Selection
    frames: tuple[int, ...]
    counterfactual: Selection
    counterfactual_frames: tuple[int, ...]
    logits: list[float]
    counterfactual_logits: list[float]
    answer_text: str
    answer_elements: list[str]
    rewards: RewardBreakdown
    advantage: float = 0.0
    approximate_logits: bool = False

    def to_json(self) -> dict:
        return {
            "selection": self.selection.to_json(),
            "frames": list(self.frames),
            "counterfactual": self.counterfactual.to_json(),
            "counterfactual_frames": list(self.counterfactual_frames),
            "logits": self.logits,
            "counterfactual_logits": self.counterfactual_logits,
            "answer_text": self.answer_text,
            "answer_elements": self.answer_elements,
            "rewards": self.rewards.to_json(),
            "advantage": self.advantage,
            "log_prob": self.selection.log_prob,
            "approximate_logits": self.approximate_logits,
        }


@dataclass
class EpisodeLog:
    episode_id: str
    step: int
    epoch: int
    seed: int
    config_hash: str
    correct_index: int
    pool_frames: list[int]
    target_elements: list[str]
    sigma: list[float]
    members: list[MemberRecord] = field(default_factory=list)
    grad_norm: Optional[float] = None
    status: str = "ok"
    error: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "schema_version": LOG_SCHEMA_VERSION,
            "episode_id": self.episode_id,
            "step": self.step,
            "epoch": self.epoch,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "status": self.status,
            "error": self.error,
            "correct_index": self.correct_index,
            "pool_frames": self.pool_frames,
            "target_elements": self.target_elements,
            "sigma": self.sigma,
            "grad_norm": self.grad_norm,
            "members": [m.to_json() for m in self.members],
        }


@dataclass
class GroupRollout:
    """Everything the gradient step needs from one episode."""

    log: EpisodeLog
    pool: CandidatePool
    output: PolicyOutput


def _query(oracle: Oracle, kind: RequestKind, episode: Episode, frames=(), answer_text=None):
    return oracle.query(OracleRequest(kind=kind, episode=episode, frame_indices=tuple(frames), answer_text=answer_text))


def _score_member(oracle, episode, pool, question_elements, selection, counterfactual, config) -> MemberRecord:
    pos = pool.indices
    frames = tuple(sorted(pos[i] for i in selection.ordered_indices))
    cf_frames = tuple(sorted(pos[i] for i in counterfactual.ordered_indices))
    o = _query(oracle, RequestKind.LOGITS, episode, frames)
    answer = _query(oracle, RequestKind.ANSWER, episode, frames)
    back = _query(oracle, RequestKind.ELEMENTS_FROM_ANSWER, episode, answer_text=answer.text)
    o_cf = _query(oracle, RequestKind.LOGITS, episode, cf_frames)
    if o.logits is None or o_cf.logits is None:
        raise OracleError("oracle returned no logits", episode.episode_id)
    answer_elements = back.elements if back.elements is not None else frozenset()
    r_ans = answer_reward(answer.text, episode.question)
    r_cycle = cycle_reward(question_elements, answer_elements)
    r_cf = counterfactual_reward(o.logits, o_cf.logits, cap=config.r_cf_cap)
    return MemberRecord(
        selection=selection,
        frames=frames,
        counterfactual=counterfactual,
        counterfactual_frames=cf_frames,
        logits=[float(x) for x in o.logits],
        counterfactual_logits=[float(x) for x in o_cf.logits],
        answer_text=answer.text,
        answer_elements=sorted(answer_elements),
        rewards=composite_reward(r_ans, r_cycle, r_cf, config.lambda1, config.lambda2),
        approximate_logits=bool(o.approximate_logits or o_cf.approximate_logits),
    )


def run_group(
    episode: Episode,
    params: PolicyParams,
    config: TrainConfig,
    oracle: Oracle,
    rng_path: tuple[int, ...],
    step: int = 0,
    epoch: int = 0,
    config_hash: str = "",
) -> GroupRollout:
    """Sample G subsets plus counterfactuals for one episode and score them.

    ``rng_path`` identifies the episode in the seed tree; member ``i`` draws
    from ``rng_path + (i, purpose)`` so the order in which oracle calls
    complete cannot change any draw.
    """
    question_elements = extract_target_elements(oracle, episode)
    pool = pool_for_episode(episode, question_elements, config.m, config.detection_threshold)
    output = policy_forward(params, pool.features(), episode.question.question_feature, episode.episode_id)
    k = min(config.k, len(pool))
    selections = []
    for i in range(config.groups):
        s = sample_subset(output.scores, k, rng_for(config.master_seed, *rng_path, i, _SAMPLE))
        cf_member = 0 if config.shared_counterfactual else i
        s_cf = sample_counterfactual(
            output.scores, len(s), rng_for(config.master_seed, *rng_path, cf_member, _COUNTERFACTUAL)
        )
        selections.append((s, s_cf))

    def score(pair):
        return _score_member(oracle, episode, pool, question_elements, pair[0], pair[1], config)

    if config.max_workers > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as ex:
            members = list(ex.map(score, selections))
    else:
        members = [score(pair) for pair in selections]

    for member, adv in zip(members, compute_advantages([m.rewards.total for m in members])):
        member.advantage = adv
    episode_log = EpisodeLog(
        episode_id=episode.episode_id,
        step=step,
        epoch=epoch,
        seed=int(episode.seed) if episode.seed is not None else -1,
        config_hash=config_hash,
        correct_index=episode.question.correct_index,
        pool_frames=pool.indices,
        target_elements=sorted(question_elements),
        sigma=[float(x) for x in output.scores],
        members=members,
    )
    return GroupRollout(episode_log, pool, output)


def group_logit_gradient(output, selections: Sequence[Selection], advantages: Sequence[float]) -> np.ndarray:
    """``(1/G) sum_i A_i d log pi(s_i) / d logits`` for one group."""
    dz = np.zeros(len(output.scores))
    for selection, adv in zip(selections, advantages):
        if adv != 0.0:
            dz += adv * log_prob_logit_grad(output, selection.ordered_indices)
    return dz / len(selections)


def policy_gradient_step(
    params: PolicyParams, optimizer: Adam, rollout: GroupRollout, lr: float, mask: Optional[PolicyParams] = None,
    skip_degenerate: bool = True,
) -> Optional[PolicyParams]:
    """Apply one Adam ascent step on ``(1/G) sum_i A_i grad log pi(s_i)``.

    The per-member log-prob gradients are summed at the logits and pushed
    through a single backward pass, which equals summing member gradients.
    Returns the ascent direction, or None when the step was skipped.
    """
    members = rollout.log.members
    advantages = [m.advantage for m in members]
    if skip_degenerate and all(a == 0.0 for a in advantages):
        rollout.log.grad_norm = 0.0
        return None
    dz = group_logit_gradient(rollout.output, [m.selection for m in members], advantages)
    try:
        ascent = backward(params, rollout.output, dz, rollout.log.episode_id)
    except NumericalError as exc:
        log.error("skipping update: %s", exc)
        rollout.log.status = "nonfinite_gradient"
        return None
    rollout.log.grad_norm = ascent.l2_norm()
    loss_grad = ascent.zeros_like()
    loss_grad.add_scaled_(ascent, -1.0)
    optimizer.step(params, loss_grad, lr, mask)
    return ascent


# -- training loop ------------------------------------------------------------------


def make_oracle(config: TrainConfig) -> Oracle:
    if config.oracle == "synthetic":
        from .oracles.synthetic import SyntheticOracle

        return SyntheticOracle(config.env)
    from .oracles.http import EndpointConfig, HttpOracle

    return HttpOracle(EndpointConfig.from_settings(config.http, groups=config.groups))


def load_training_set(config: TrainConfig) -> list[Episode]:
    if config.dataset:
        episodes = list(read_episodes(config.dataset))
        return episodes[: config.train_instances] if config.train_instances else episodes
    return [generate_episode(config.env, episode_seed_for(config.env, "train", n)) for n in range(config.train_instances)]


def heldout_set(spec: SyntheticSpec, count: int) -> list[Episode]:
    return [generate_episode(spec, episode_seed_for(spec, "heldout", n)) for n in range(count)]


def epoch_order(config: TrainConfig, epoch: int, n: int) -> list[int]:
    return rng_for(config.master_seed, epoch, _SHUFFLE).permutation(n).tolist()


@dataclass
class TrainResult:
    params: PolicyParams
    steps: int
    updates: int
    skipped_degenerate: int
    failed_episodes: int
    mean_reward_curve: list[float]
    run_dir: Optional[Path] = None

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "updates": self.updates,
            "skipped_degenerate": self.skipped_degenerate,
            "failed_episodes": self.failed_episodes,
            "final_mean_reward_window50": float(np.mean(self.mean_reward_curve[-50:])) if self.mean_reward_curve else None,
        }


def _write_manifest(run_dir: Path, config: TrainConfig, started: float) -> None:
    manifest = {
        "config": config.to_json(),
        "config_hash": config.hash(),
        "code_version": __version__,
        "master_seed": config.master_seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "ended": None,
        "outputs": {
            "episodes": "episodes.jsonl",
            "checkpoint": "policy.ckpt",
            "trainer_state": "trainer_state.npz",
            "metrics": "metrics.json",
        },
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (run_dir / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))


def _save_state(run_dir: Path, params, optimizer, cursor, counters) -> None:
    save_checkpoint(params, run_dir / "policy.ckpt")
    arrays = optimizer.state_arrays()
    arrays["cursor"] = np.array(cursor)
    for key, value in counters.items():
        arrays[f"counter.{key}"] = np.array(value)
    with open(run_dir / "trainer_state.npz", "wb") as fh:
        np.savez(fh, **arrays)


def train(
    config: TrainConfig,
    run_dir: Optional[str | Path] = None,
    *,
    resume: bool = False,
    stop_after: Optional[int] = None,
    oracle: Optional[Oracle] = None,
    episodes: Optional[list[Episode]] = None,
    progress: Optional[Callable[[EpisodeLog], None]] = None,
) -> TrainResult:
    """Run the training loop for ``config.epochs`` passes over the training set.

    With ``run_dir`` the manifest, EpisodeLog stream, checkpoints and trainer
    state are written there; ``resume`` continues from the last saved state
    and truncates the log to match it. ``stop_after`` ends the run after that
    many episodes (counted across resumes), leaving a resumable state.
    """
    oracle = oracle or make_oracle(config)
    episodes = episodes if episodes is not None else load_training_set(config)
    policy_seed = config.master_seed if config.policy_seed is None else config.policy_seed
    params = init_policy(config.feature_dim, config.hidden, policy_seed, config.layers)
    optimizer = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    counters = {"updates": 0, "skipped_degenerate": 0, "failed_episodes": 0}
    cursor = 0
    config_hash = config.hash()
    started = time.time()
    log_fh = None
    curve: list[float] = []

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "episodes.jsonl"
        if resume:
            state_path = run_dir / "trainer_state.npz"
            if not state_path.exists():
                raise InputError(f"{state_path}: nothing to resume from")
            params = load_checkpoint(run_dir / "policy.ckpt")
            with np.load(state_path) as state:
                optimizer.load_state_arrays(state)
                cursor = int(state["cursor"])
                for key in counters:
                    counters[key] = int(state[f"counter.{key}"])
            lines = log_path.read_text().splitlines(keepends=True) if log_path.exists() else []
            if len(lines) < cursor:
                raise InputError(f"{log_path}: log has {len(lines)} records, state expects {cursor}")
            lines = lines[:cursor]
            log_path.write_text("".join(lines))
            for line in lines:
                rec = json.loads(line)
                if rec["members"]:
                    curve.append(float(np.mean([m["rewards"]["total"] for m in rec["members"]])))
        else:
            _write_manifest(run_dir, config, started)
            log_path.write_text("")
        log_fh = open(log_path, "a", encoding="utf-8")

    n = len(episodes)
    total_steps = config.epochs * n
    try:
        step = cursor
        while step < total_steps:
            if stop_after is not None and step >= stop_after:
                break
            epoch, pos = divmod(step, n)
            episode = episodes[epoch_order(config, epoch, n)[pos]]
            try:
                rollout = run_group(episode, params, config, oracle, (epoch, pos), step, epoch, config_hash)
            except OracleError as exc:
                log.warning("episode %s failed: %s", episode.episode_id, exc)
                counters["failed_episodes"] += 1
                record = EpisodeLog(
                    episode_id=episode.episode_id, step=step, epoch=epoch,
                    seed=int(episode.seed) if episode.seed is not None else -1,
                    config_hash=config_hash, correct_index=episode.question.correct_index,
                    pool_frames=[], target_elements=[], sigma=[], status="oracle_failure", error=str(exc),
                )
            else:
                record = rollout.log
                if policy_gradient_step(params, optimizer, rollout, config.learning_rate, skip_degenerate=config.skip_degenerate) is None:
                    if record.status == "ok":
                        counters["skipped_degenerate"] += 1
                else:
                    counters["updates"] += 1
                curve.append(float(np.mean([m.rewards.total for m in record.members])))
            if log_fh is not None:
                log_fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
                log_fh.flush()
            if progress is not None:
                progress(record)
            step += 1
            if run_dir is not None and (step % config.checkpoint_every == 0 or step == total_steps):
                _save_state(run_dir, params, optimizer, step, counters)
        if run_dir is not None and stop_after is not None and step < total_steps:
            _save_state(run_dir, params, optimizer, step, counters)
    finally:
        if log_fh is not None:
            log_fh.close()

    result = TrainResult(params, step, counters["updates"], counters["skipped_degenerate"],
                         counters["failed_episodes"], curve, run_dir)
    if run_dir is not None:
        (run_dir / "metrics.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True))
        manifest_path = run_dir / "manifest.json"
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
            manifest["ended"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
            manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return result


# -- inference and evaluation ----------------------------------------------------------


@dataclass
class Inference:
    selection: Selection
    frames: tuple[int, ...]
    answer_text: str
    logits: Optional[np.ndarray]
    pool: CandidatePool
    scores: np.ndarray


def _strategy_scores(strategy: str, params, pool: CandidatePool, episode: Episode) -> np.ndarray:
    if strategy == "policy":
        return policy_forward(params, pool.features(), episode.question.question_feature).scores
    if strategy == "visual":
        q = episode.question.question_feature
        feats = pool.features()
        cos = feats @ q / (np.linalg.norm(feats, axis=1) * np.linalg.norm(q))
        return (cos + 1.0) / 2.0
    raise InputError(f"unknown selection strategy {strategy!r}")


def infer(
    params: Optional[PolicyParams],
    episode: Episode,
    k: int,
    oracle: Oracle,
    m: int = 32,
    threshold: float = 0.7,
    strategy: str = "policy",
) -> Inference:
    """Build the pool, pick K frames, and ask the oracle once."""
    elements = extract_target_elements(oracle, episode)
    pool = pool_for_episode(episode, elements, m, threshold)
    if strategy == "uniform":
        picks = uniform_indices(len(pool), k)
        selection = Selection(tuple(picks), SelectionKind.TOPK)
        scores = np.zeros(len(pool))
        scores[picks] = 1.0
    else:
        if strategy == "policy" and params is None:
            raise InputError("policy strategy needs parameters")
        scores = _strategy_scores(strategy, params, pool, episode)
        selection = top_k_select(scores, k)
    frames = tuple(pool.indices[i] for i in selection.temporal())
    reply = _query(oracle, RequestKind.ANSWER, episode, frames)
    return Inference(selection, frames, reply.text, reply.logits, pool, np.asarray(scores))


def evaluate(
    params: Optional[PolicyParams],
    episodes: Sequence[Episode],
    k: int,
    oracle: Oracle,
    m: int = 32,
    threshold: float = 0.7,
    strategy: str = "policy",
) -> dict:
    """Accuracy, necessary-frame recall (synthetic only) and mean R_cf gap.

    The R_cf gap compares the answer logits on the chosen frames with those
    on the K lowest-scoring pool frames (top-K of the inverted scores).
    """
    if not episodes:
        raise InputError("evaluate needs at least one episode")
    correct, recalls, gaps = [], [], []
    for episode in episodes:
        res = infer(params, episode, k, oracle, m, threshold, strategy)
        correct.append(answer_reward(res.answer_text, episode.question))
        if episode.truth is not None:
            hits = len(set(res.frames) & episode.truth.necessary_indices)
            recalls.append(hits / len(episode.truth.necessary_indices))
        inv = 1.0 - np.clip(res.scores, 0.0, 1.0)
        cf = top_k_select(inv, len(res.selection))
        cf_frames = tuple(res.pool.indices[i] for i in cf.temporal())
        o_cf = _query(oracle, RequestKind.LOGITS, episode, cf_frames).logits
        if res.logits is not None and o_cf is not None:
            gaps.append(counterfactual_reward(res.logits, o_cf))
    return {
        "strategy": strategy,
        "instances": len(episodes),
        "accuracy": float(np.mean(correct)),
        "necessary_frame_recall": float(np.mean(recalls)) if recalls else None,
        "mean_r_cf_gap": float(np.mean(gaps)) if gaps else None,
    }


# -- diagnostics -----------------------------------------------------------------


def _log_softmax(z: Sequence[float]) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def cib_diagnostics(records: Iterable[dict]) -> dict:
    """Surrogate estimates from EpisodeLog records (as parsed JSON).

    ``j1_hat`` is the mean log softmax-probability of the correct option on
    the sampled subsets; ``j2_hat`` the mean counterfactual reward.
    """
    j1, j2 = [], []
    for rec in records:
        correct = rec["correct_index"]
        for member in rec.get("members", []):
            j1.append(float(_log_softmax(member["logits"])[correct]))
            j2.append(float(member["rewards"]["r_cf"]))
    return {
        "j1_hat": float(np.mean(j1)) if j1 else float("nan"),
        "j2_hat": float(np.mean(j2)) if j2 else float("nan"),
        "samples": len(j1),
    }
