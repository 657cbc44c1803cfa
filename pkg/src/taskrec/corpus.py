"""Log parsing, preprocessing, help labeling, user splits, and synthetic corpora.

A "command sequence" is the document unit consumed by every model in this
package: an ordered list of integer command ids with optional per-step time
gaps in seconds (gap[j] is the time between command j-1 and j, gap[0] = 0).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, UnknownCommandError, ValidationError

UNK_TOKEN = "<unk>"


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    """Ordered command-name table with a set of ids flagged as help actions."""

    names: tuple[str, ...]
    help_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError("vocabulary names must be unique")
        if any(i < 0 or i >= len(self.names) for i in self.help_ids):
            raise ValidationError("help_ids outside vocabulary range")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    @property
    def unk_id(self) -> int | None:
        try:
            return self.names.index(UNK_TOKEN)
        except ValueError:
            return None

    def encode(self, name: str) -> int:
        """Map a command name to its id; unknown names go to <unk> if present."""
        idx = self.index.get(name)
        if idx is not None:
            return idx
        unk = self.unk_id
        if unk is None:
            raise UnknownCommandError(f"unknown command {name!r}")
        return unk

    def with_unk(self) -> "Vocabulary":
        """Return a copy with a reserved <unk> id appended (idempotent)."""
        if UNK_TOKEN in self.names:
            return self
        return Vocabulary(self.names + (UNK_TOKEN,), self.help_ids)

    def digest(self) -> str:
        """Stable hash identifying this vocabulary, stored in model files."""
        h = hashlib.sha256()
        h.update("\x00".join(self.names).encode())
        h.update(("\x01" + ",".join(map(str, sorted(self.help_ids)))).encode())
        return h.hexdigest()

    @staticmethod
    def from_names(names, help_names=()) -> "Vocabulary":
        ordered = tuple(sorted(set(names)))
        index = {n: i for i, n in enumerate(ordered)}
        help_ids = frozenset(index[n] for n in help_names if n in index)
        return Vocabulary(ordered, help_ids)


@dataclass(frozen=True)
class RawSession:
    user: str
    events: tuple[tuple[str, float], ...]  # (command name, timestamp)


@dataclass(frozen=True)
class CommandSequence:
    user: str
    commands: tuple[int, ...]
    gaps: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.gaps is not None:
            if len(self.gaps) != len(self.commands):
                raise ValidationError("gaps must align with commands")
            if any(g < 0 for g in self.gaps):
                raise ValidationError("gaps must be nonnegative")

    def __len__(self) -> int:
        return len(self.commands)


@dataclass(frozen=True)
class HelpExample:
    sequence: CommandSequence
    label: bool  # True = help


@dataclass(frozen=True)
class HelpInjection:
    """Rules for planting help signals into synthetic positives."""

    loop_rate: float = 0.7
    pause_rate: float = 0.7
    # negatives occasionally contain one isolated long gap (a natural break),
    # so a single large gap alone does not give the class away
    natural_pause_rate: float = 0.5

    def validate(self):
        for p in (self.loop_rate, self.pause_rate, self.natural_pause_rate):
            if not 0.0 <= p <= 1.0:
                raise ValidationError("injection rates must lie in [0, 1]")
        if self.loop_rate == 0.0 and self.pause_rate == 0.0:
            raise ValidationError("at least one injection rate must be positive")


@dataclass(frozen=True)
class SyntheticSpec:
    num_tasks: int
    vocab_per_task: int
    docs: int
    doc_length: int = 21
    task_mixing: float = 0.0
    transition_sharpness: float = 10.0
    # fraction of each task's slice shared with the previous task's; 0 gives
    # fully disjoint per-task vocabularies
    vocab_overlap: float = 0.0
    help_injection: HelpInjection | None = None

    def validate(self):
        if self.num_tasks < 1:
            raise ValidationError("num_tasks must be >= 1")
        if self.vocab_per_task < 2:
            raise ValidationError("vocab_per_task must be >= 2")
        if self.docs < 1 or self.doc_length < 2:
            raise ValidationError("docs and doc_length must be positive")
        if not 0.0 <= self.task_mixing <= 1.0:
            raise ValidationError("task_mixing must lie in [0, 1]")
        if self.task_mixing > 0.0 and self.num_tasks < 2:
            raise ValidationError("task_mixing needs at least 2 tasks")
        if self.transition_sharpness < 0:
            raise ValidationError("transition_sharpness must be >= 0")
        if not 0.0 <= self.vocab_overlap < 1.0:
            raise ValidationError("vocab_overlap must lie in [0, 1)")
        if self.help_injection is not None:
            self.help_injection.validate()


@dataclass
class ParseResult:
    sessions: list[RawSession]
    skipped: int


# ---------------------------------------------------------------------------
# Parsing and preprocessing
# ---------------------------------------------------------------------------

def parse_log(stream) -> ParseResult:
    """Parse a JSONL event stream into per-(user, session) RawSessions.

    Each line must carry "user", "session", "command", "ts". Malformed lines
    are skipped and counted. Raises DataError when no valid line remains.
    """
    groups: dict[tuple[str, str], list[tuple[str, float]]] = {}
    skipped = 0
    for line in stream:
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            key = (str(rec["user"]), str(rec["session"]))
            event = (str(rec["command"]), float(rec["ts"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            skipped += 1
            continue
        groups.setdefault(key, []).append(event)
    if not groups:
        raise DataError(f"no valid log lines ({skipped} skipped)")
    sessions = []
    for (user, _session), events in sorted(groups.items()):
        events.sort(key=lambda e: e[1])
        sessions.append(RawSession(user=user, events=tuple(events)))
    return ParseResult(sessions=sessions, skipped=skipped)


def filter_denylist(sessions: list[RawSession], denylist) -> list[RawSession]:
    """Drop events whose command name appears in the denylist."""
    deny = set(denylist)
    out = []
    for s in sessions:
        kept = tuple(e for e in s.events if e[0] not in deny)
        if kept:
            out.append(RawSession(user=s.user, events=kept))
    return out


def build_vocabulary(sessions: list[RawSession], help_names=()) -> Vocabulary:
    names = {e[0] for s in sessions for e in s.events}
    return Vocabulary.from_names(names, help_names)


def _cap_runs(commands, gaps, max_repeat):
    out_c, out_g = [], []
    run = 0
    for j, c in enumerate(commands):
        run = run + 1 if out_c and c == out_c[-1] else 1
        if run <= max_repeat:
            out_c.append(c)
            if gaps is not None:
                out_g.append(gaps[j])
    return out_c, (out_g if gaps is not None else None)


def preprocess(sessions, vocab: Vocabulary, max_repeat: int = 2,
               target_len: int = 21) -> list[CommandSequence]:
    """Encode, cap consecutive repeats, and normalize lengths.

    Repeat capping runs first, then sequences shorter than target_len are
    dropped and longer ones truncated to their first target_len commands.
    Accepts RawSessions or already-encoded CommandSequences (idempotent).
    """
    if target_len < 2:
        raise ValidationError("target_len must be >= 2")
    out = []
    for s in sessions:
        if isinstance(s, CommandSequence):
            commands = list(s.commands)
            gaps = list(s.gaps) if s.gaps is not None else None
            user = s.user
        else:
            commands = [vocab.encode(name) for name, _ in s.events]
            ts = [t for _, t in s.events]
            gaps = [0.0] + [ts[j] - ts[j - 1] for j in range(1, len(ts))]
            user = s.user
        commands, gaps = _cap_runs(commands, gaps, max_repeat)
        if len(commands) < target_len:
            continue
        commands = commands[:target_len]
        if gaps is not None:
            gaps = gaps[:target_len]
            gaps[0] = 0.0
        out.append(CommandSequence(user=user, commands=tuple(commands),
                                   gaps=tuple(gaps) if gaps is not None else None))
    return out


def label_help(sequences, help_ids, k: int = 8):
    """Split sequences into help positives and a no-help remainder.

    A sequence whose first help command sits at index >= k becomes a positive,
    trimmed to everything strictly before that command; positives left shorter
    than k+1 are discarded. Sequences whose first help command comes earlier
    are dropped entirely. Help-free sequences go to the remainder.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    help_ids = set(help_ids)
    positives, rest = [], []
    for seq in sequences:
        first = next((j for j, c in enumerate(seq.commands) if c in help_ids), None)
        if first is None:
            rest.append(seq)
            continue
        if first < k:
            continue
        trimmed = replace(
            seq,
            commands=seq.commands[:first],
            gaps=seq.gaps[:first] if seq.gaps is not None else None,
        )
        if len(trimmed) < k + 1:
            continue
        positives.append(HelpExample(sequence=trimmed, label=True))
    return positives, rest


def sample_negatives(rest, n: int, seed: int) -> list[HelpExample]:
    """Draw n no-help examples uniformly without replacement (seeded)."""
    if n > len(rest):
        raise DataError(f"cannot sample {n} negatives from {len(rest)} sequences")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(rest), size=n, replace=False)
    return [HelpExample(sequence=rest[i], label=False) for i in sorted(idx)]


def split_by_user(sequences, test_fraction: float = 0.2, seed: int = 0):
    """Partition sequences so every user lands entirely on one side."""
    users = sorted({s.user for s in sequences})
    if len(users) < 2:
        raise DataError("need at least 2 users to split")
    if not 0.0 <= test_fraction <= 1.0:
        raise ValidationError("test_fraction must lie in [0, 1]")
    n_test = int(round(test_fraction * len(users)))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(users))
    test_users = {users[i] for i in order[:n_test]}
    train = [s for s in sequences if s.user not in test_users]
    test = [s for s in sequences if s.user in test_users]
    return train, test


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

def _task_chains(spec: SyntheticSpec, rng):
    """Per-task transition matrices over that task's vocabulary slice.

    Each task follows its own random permutation cycle over its slice with
    probability sharpness/(sharpness+1); otherwise the next command is
    uniform over the slice. Infinite sharpness gives an exact cycle.
    """
    v = spec.vocab_per_task
    chains = []
    for _ in range(spec.num_tasks):
        cycle = rng.permutation(v)
        trans = np.zeros((v, v))
        if math.isinf(spec.transition_sharpness):
            for i in range(v):
                trans[cycle[i], cycle[(i + 1) % v]] = 1.0
        else:
            p_follow = spec.transition_sharpness / (spec.transition_sharpness + 1.0)
            trans[:, :] = (1.0 - p_follow) / v
            for i in range(v):
                trans[cycle[i], cycle[(i + 1) % v]] += p_follow
        chains.append(trans)
    return chains


def _slice_stride(spec: SyntheticSpec) -> int:
    stride = int(round(spec.vocab_per_task * (1.0 - spec.vocab_overlap)))
    return max(1, stride)


def synthetic_vocab_size(spec: SyntheticSpec) -> int:
    return (spec.num_tasks - 1) * _slice_stride(spec) + spec.vocab_per_task


def synthetic_vocabulary(spec: SyntheticSpec) -> Vocabulary:
    # zero-padded names sort back into id order
    return Vocabulary(tuple(f"cmd_{i:03d}"
                            for i in range(synthetic_vocab_size(spec))))


def task_slice(spec: SyntheticSpec, z: int) -> range:
    base = z * _slice_stride(spec)
    return range(base, base + spec.vocab_per_task)


def _emit_doc(spec, chains, task, rng):
    v = spec.vocab_per_task
    base = task * _slice_stride(spec)
    total = synthetic_vocab_size(spec)
    trans = chains[task]
    state = int(rng.integers(v))
    commands = [base + state]
    for _ in range(spec.doc_length - 1):
        state = int(rng.choice(v, p=trans[state]))
        if spec.task_mixing > 0 and rng.random() < spec.task_mixing:
            # a command drawn uniformly from outside this task's slice
            foreign = int(rng.integers(total - v))
            foreign += v if foreign >= base else 0
            commands.append(foreign)
        else:
            commands.append(base + state)
    return commands


def generate_synthetic(spec: SyntheticSpec, seed: int):
    """Generate a planted-task corpus.

    Returns (sequences, task_labels, vocabulary). Each document draws a task
    uniformly, then walks that task's Markov chain over its vocabulary slice,
    contaminated with foreign-slice commands at rate task_mixing. Gaps are
    small uniform values in [1, 10] seconds.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    chains = _task_chains(spec, rng)
    vocab = synthetic_vocabulary(spec)
    sequences, labels = [], []
    for d in range(spec.docs):
        task = int(rng.integers(spec.num_tasks))
        commands = _emit_doc(spec, chains, task, rng)
        gaps = [0.0] + list(rng.uniform(1.0, 10.0, size=len(commands) - 1))
        sequences.append(CommandSequence(
            user=f"synth_user_{d % max(2, spec.docs // 10)}",
            commands=tuple(commands), gaps=tuple(gaps)))
        labels.append(task)
    return sequences, labels, vocab


def generate_help_data(spec: SyntheticSpec, n_positive: int, n_negative: int,
                       seed: int, min_context: int = 8):
    """Generate labeled help examples from the planted-task generator.

    Negatives are plain task documents. Positives carry a planted 2-command
    loop repeated >= 3 times and/or a burst of long (>= 60 s) pauses.
    The planted behavior starts after min_context and runs to the end of the
    sequence, mirroring real help sequences, which are trimmed immediately
    before the help action.
    """
    spec.validate()
    inj = spec.help_injection or HelpInjection()
    inj.validate()
    rng = np.random.default_rng(seed)
    chains = _task_chains(spec, rng)

    def plain(i, label):
        task = int(rng.integers(spec.num_tasks))
        commands = _emit_doc(spec, chains, task, rng)
        gaps = [0.0] + list(rng.uniform(1.0, 10.0, size=len(commands) - 1))
        return commands, gaps, task

    examples = []
    for i in range(n_negative):
        commands, gaps, _ = plain(i, False)
        if rng.random() < inj.natural_pause_rate:
            pos = int(rng.integers(1, len(gaps)))
            gaps[pos] = float(rng.uniform(60.0, 300.0))
        examples.append(HelpExample(
            CommandSequence(f"neg_{i}", tuple(commands), tuple(gaps)), False))
    for i in range(n_positive):
        commands, gaps, task = plain(i, True)
        has_loop = rng.random() < inj.loop_rate
        has_pause = rng.random() < inj.pause_rate
        if not (has_loop or has_pause):
            has_loop = True
        start = int(rng.integers(min_context,
                                 max(min_context + 1, len(commands) - 6)))
        if has_loop:
            base = task * _slice_stride(spec)
            a, b = rng.choice(spec.vocab_per_task, size=2, replace=False)
            for j in range(start, len(commands)):
                commands[j] = base + int(a if (j - start) % 2 == 0 else b)
        if has_pause:
            n_pauses = 2 + int(rng.integers(3))
            for j in range(len(gaps) - n_pauses, len(gaps)):
                if j > 0:
                    gaps[j] = float(rng.uniform(60.0, 300.0))
        examples.append(HelpExample(
            CommandSequence(f"pos_{i}", tuple(commands), tuple(gaps)), True))
    return examples


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_corpus(path, sequences):
    with open(path, "w") as fh:
        for s in sequences:
            rec = {"user": s.user, "commands": list(s.commands)}
            if s.gaps is not None:
                rec["gaps"] = list(s.gaps)
            fh.write(json.dumps(rec) + "\n")


def read_corpus(path) -> list[CommandSequence]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(CommandSequence(
                user=rec["user"], commands=tuple(rec["commands"]),
                gaps=tuple(rec["gaps"]) if "gaps" in rec else None))
    if not out:
        raise DataError(f"empty corpus file: {path}")
    return out


def write_help_examples(path, examples):
    with open(path, "w") as fh:
        for e in examples:
            s = e.sequence
            rec = {"user": s.user, "commands": list(s.commands),
                   "label": int(e.label)}
            if s.gaps is not None:
                rec["gaps"] = list(s.gaps)
            fh.write(json.dumps(rec) + "\n")


def read_help_examples(path) -> list[HelpExample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(HelpExample(
                sequence=CommandSequence(
                    user=rec["user"], commands=tuple(rec["commands"]),
                    gaps=tuple(rec["gaps"]) if "gaps" in rec else None),
                label=bool(rec["label"])))
    if not out:
        raise DataError(f"empty help-example file: {path}")
    return out


def write_vocabulary(path, vocab: Vocabulary):
    with open(path, "w") as fh:
        json.dump({"names": list(vocab.names),
                   "help_ids": sorted(vocab.help_ids)}, fh, indent=2)


def read_vocabulary(path) -> Vocabulary:
    with open(path) as fh:
        rec = json.load(fh)
    return Vocabulary(tuple(rec["names"]), frozenset(rec.get("help_ids", ())))
