"""Unified dialogue data model: ingestion, adapters, synthesis, statistics.

The on-disk unified format is line-delimited JSON, one dialogue per line:

    {"id": "...", "domains": [...], "turns": [{"speaker": "user"|"system",
     "text": "...", "acts": [...], "state": {"domain-slot": "value"},
     "intent": "..."}, ...]}

``acts``, ``state`` and ``intent`` are present only when the source carries
annotations. Files are UTF-8 without BOM. :func:`write_unified` emits a
canonical serialization (fixed key order, sorted domains/acts/state keys)
so that load -> write round-trips canonical files byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

USER = "user"
SYSTEM = "system"
SPEAKERS = (USER, SYSTEM)


class CorpusFormatError(ValueError):
    """Raised when a unified-format file violates the record schema."""


@dataclass
class Turn:
    speaker: str
    text: str
    acts: set[str] | None = None
    state: dict[str, str] | None = None
    intent: str | None = None

    def __post_init__(self):
        if self.speaker not in SPEAKERS:
            raise ValueError(f"speaker must be one of {SPEAKERS}, got {self.speaker!r}")
        if not self.text.strip():
            raise ValueError("turn text is empty after trimming")


@dataclass
class Dialogue:
    id: str
    domains: set[str]
    turns: list[Turn]

    def __post_init__(self):
        if not self.id:
            raise ValueError("dialogue id is empty")
        if not self.turns:
            raise ValueError(f"dialogue {self.id!r} has no turns")


@dataclass
class CorpusStats:
    num_dialogues: int
    num_utterances: int
    avg_turns: float
    num_domains: int


# ---------------------------------------------------------------------------
# unified format I/O
# ---------------------------------------------------------------------------

def _turn_from_record(rec: dict, line_no: int, turn_no: int) -> Turn:
    where = f"line {line_no}, turn {turn_no}"
    if not isinstance(rec, dict):
        raise CorpusFormatError(f"{where}: turn is not an object")
    for fld in ("speaker", "text"):
        if fld not in rec:
            raise CorpusFormatError(f"{where}: missing field '{fld}'")
    speaker = rec["speaker"]
    if speaker not in SPEAKERS:
        raise CorpusFormatError(f"{where}: field 'speaker' must be 'user' or 'system'")
    text = rec["text"]
    if not isinstance(text, str) or not text.strip():
        raise CorpusFormatError(f"{where}: field 'text' must be a non-empty string")
    acts = rec.get("acts")
    if acts is not None:
        if not isinstance(acts, list) or not all(isinstance(a, str) for a in acts):
            raise CorpusFormatError(f"{where}: field 'acts' must be a list of strings")
        acts = set(acts)
    state = rec.get("state")
    if state is not None:
        if not isinstance(state, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in state.items()
        ):
            raise CorpusFormatError(f"{where}: field 'state' must map strings to strings")
        state = dict(state)
    intent = rec.get("intent")
    if intent is not None and not isinstance(intent, str):
        raise CorpusFormatError(f"{where}: field 'intent' must be a string")
    return Turn(speaker=speaker, text=text, acts=acts, state=state, intent=intent)


def _dialogue_from_record(rec: dict, line_no: int) -> Dialogue:
    where = f"line {line_no}"
    if not isinstance(rec, dict):
        raise CorpusFormatError(f"{where}: record is not an object")
    for fld in ("id", "domains", "turns"):
        if fld not in rec:
            raise CorpusFormatError(f"{where}: missing field '{fld}'")
    if not isinstance(rec["id"], str) or not rec["id"]:
        raise CorpusFormatError(f"{where}: field 'id' must be a non-empty string")
    domains = rec["domains"]
    if not isinstance(domains, list) or not all(isinstance(d, str) for d in domains):
        raise CorpusFormatError(f"{where}: field 'domains' must be a list of strings")
    turns = rec["turns"]
    if not isinstance(turns, list) or not turns:
        raise CorpusFormatError(f"{where}: field 'turns' must be a non-empty list")
    parsed = [_turn_from_record(t, line_no, i) for i, t in enumerate(turns)]
    return Dialogue(id=rec["id"], domains=set(domains), turns=parsed)


def load_unified(path: str | Path) -> list[Dialogue]:
    """Load a unified-format corpus file, preserving file order."""
    path = Path(path)
    dialogues: list[Dialogue] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            d = _dialogue_from_record(rec, line_no)
            if d.id in seen:
                raise CorpusFormatError(f"line {line_no}: duplicate dialogue id {d.id!r}")
            seen.add(d.id)
            dialogues.append(d)
    return dialogues


def turn_to_record(t: Turn) -> dict:
    rec: dict = {"speaker": t.speaker, "text": t.text}
    if t.acts is not None:
        rec["acts"] = sorted(t.acts)
    if t.state is not None:
        rec["state"] = {k: t.state[k] for k in sorted(t.state)}
    if t.intent is not None:
        rec["intent"] = t.intent
    return rec


def dialogue_to_record(d: Dialogue) -> dict:
    return {
        "id": d.id,
        "domains": sorted(d.domains),
        "turns": [turn_to_record(t) for t in d.turns],
    }


def write_unified(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    """Write dialogues in canonical unified format (one JSON object per line)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for d in dialogues:
            fh.write(json.dumps(dialogue_to_record(d), ensure_ascii=False,
                                separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# normalization and statistics
# ---------------------------------------------------------------------------

def _merge_turns(a: Turn, b: Turn) -> Turn:
    acts = None
    if a.acts is not None or b.acts is not None:
        acts = (a.acts or set()) | (b.acts or set())
    state = None
    if a.state is not None or b.state is not None:
        state = dict(a.state or {})
        state.update(b.state or {})
    intent = a.intent if a.intent is not None else b.intent
    return Turn(speaker=a.speaker, text=f"{a.text} {b.text}",
                acts=acts, state=state, intent=intent)


def normalize_speakers(d: Dialogue) -> Dialogue:
    """Merge consecutive same-speaker turns so the result alternates.

    Texts are joined with a single space; acts and state entries are
    unioned (later state values win); the earliest intent is kept.
    """
    merged: list[Turn] = []
    for turn in d.turns:
        if merged and merged[-1].speaker == turn.speaker:
            merged[-1] = _merge_turns(merged[-1], turn)
        else:
            merged.append(Turn(turn.speaker, turn.text, turn.acts, turn.state, turn.intent))
    return Dialogue(id=d.id, domains=set(d.domains), turns=merged)


def compute_stats(dialogues: list[Dialogue]) -> CorpusStats:
    """Corpus-level counts; average turns per dialogue rounded to one decimal."""
    if not dialogues:
        raise ValueError("empty corpus")
    num_dialogues = len(dialogues)
    num_utterances = sum(len(d.turns) for d in dialogues)
    domains: set[str] = set()
    for d in dialogues:
        domains |= d.domains
    return CorpusStats(
        num_dialogues=num_dialogues,
        num_utterances=num_utterances,
        avg_turns=round(num_utterances / num_dialogues, 1),
        num_domains=len(domains),
    )


def split_corpus(dialogues: list[Dialogue], ratios: tuple[float, float, float],
                 seed: int) -> tuple[list[Dialogue], list[Dialogue], list[Dialogue]]:
    """Disjoint train/dev/test partition; floor-rounded sizes, remainder to train."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(dialogues)
    n_dev = math.floor(ratios[1] * n)
    n_test = math.floor(ratios[2] * n)
    n_train = n - n_dev - n_test
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    train = [dialogues[i] for i in order[:n_train]]
    dev = [dialogues[i] for i in order[n_train:n_train + n_dev]]
    test = [dialogues[i] for i in order[n_train + n_dev:]]
    return train, dev, test


# ---------------------------------------------------------------------------
# synthetic corpus generator
# ---------------------------------------------------------------------------

SYNTH_DOMAINS: dict[str, dict[str, list[str]]] = {
    "restaurant": {
        "food": ["thai", "italian", "chinese", "indian", "french"],
        "area": ["north", "south", "centre", "east", "west"],
        "pricerange": ["cheap", "moderate", "expensive"],
    },
    "hotel": {
        "area": ["north", "south", "centre", "east", "west"],
        "stars": ["two", "three", "four", "five"],
        "parking": ["yes", "no"],
    },
    "attraction": {
        "type": ["museum", "park", "cinema", "theatre"],
        "area": ["north", "south", "centre", "east", "west"],
    },
    "taxi": {
        "destination": ["airport", "station", "museum", "city hall"],
        "departure": ["hotel plaza", "main square", "harbour", "old town"],
    },
}

_VENUE_NAMES = ["golden palace", "river house", "blue lantern", "corner spot",
                "grand central", "little garden"]

_USER_REQUEST_TEMPLATES = [
    "i am looking for a {value} {domain} in town",
    "can you find me a {domain} with {slot} {value}",
    "i need a {domain} please something {value}",
]
_USER_REFINE_TEMPLATES = [
    "i would prefer {value} for the {slot}",
    "make the {slot} {value} please",
    "how about {value} instead",
]
_SYS_REQUEST_TEMPLATES = [
    "what {slot} would you like for the {domain}",
    "do you have a preferred {slot} for this {domain}",
]
_SYS_OFFER_TEMPLATES = [
    "{name} is a {value} {domain} matching your request",
    "i recommend {name} a fine {value} {domain} choice",
]


@dataclass
class SynthConfig:
    """Knobs for the synthetic corpus generator."""

    domains: tuple[str, ...] = tuple(SYNTH_DOMAINS)
    min_exchanges: int = 1
    max_exchanges: int = 3
    system_first_prob: float = 0.7
    second_domain_prob: float = 0.15

    def __post_init__(self):
        if self.min_exchanges < 1 or self.max_exchanges < self.min_exchanges:
            raise ValueError("exchange bounds must satisfy 1 <= min <= max")
        unknown = set(self.domains) - set(SYNTH_DOMAINS)
        if unknown:
            raise ValueError(f"unknown synthetic domains: {sorted(unknown)}")


def _synth_dialogue(rng: np.random.Generator, dlg_id: str, cfg: SynthConfig) -> Dialogue:
    domain = str(rng.choice(cfg.domains))
    slots = SYNTH_DOMAINS[domain]
    slot_names = list(slots)
    turns: list[Turn] = []
    state: dict[str, str] = {}

    def pick(options):
        return options[int(rng.integers(len(options)))]

    if rng.random() < cfg.system_first_prob:
        turns.append(Turn(SYSTEM, "hello how can i help you today", acts={"greet"}))

    n_exchanges = int(rng.integers(cfg.min_exchanges, cfg.max_exchanges + 1))
    for ex in range(n_exchanges):
        slot = pick(slot_names)
        value = pick(slots[slot])
        state[f"{domain}-{slot}"] = value
        if ex == 0:
            text = pick(_USER_REQUEST_TEMPLATES).format(domain=domain, slot=slot, value=value)
            intent = f"find_{domain}"
        else:
            text = pick(_USER_REFINE_TEMPLATES).format(slot=slot, value=value)
            intent = f"refine_{domain}"
        turns.append(Turn(USER, text, state=dict(state), intent=intent))

        if ex + 1 < n_exchanges and rng.random() < 0.5:
            ask = pick([s for s in slot_names if f"{domain}-{s}" not in state] or slot_names)
            turns.append(Turn(SYSTEM,
                              pick(_SYS_REQUEST_TEMPLATES).format(slot=ask, domain=domain),
                              acts={"request"}))
        else:
            name = pick(_VENUE_NAMES)
            turns.append(Turn(SYSTEM,
                              pick(_SYS_OFFER_TEMPLATES).format(name=name, domain=domain,
                                                                value=value),
                              acts={"inform", "offer"}))

    domains = {domain}
    if rng.random() < cfg.second_domain_prob:
        extra = str(rng.choice([d for d in cfg.domains if d != domain] or [domain]))
        domains.add(extra)
    return Dialogue(id=dlg_id, domains=domains, turns=turns)


def generate_synthetic(seed: int, n_dialogues: int,
                       config: SynthConfig | None = None) -> list[Dialogue]:
    """Deterministic templated corpus with intent/state/act annotations."""
    if n_dialogues < 1:
        raise ValueError(f"n_dialogues must be >= 1, got {n_dialogues}")
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    return [_synth_dialogue(rng, f"syn-{seed}-{i:05d}", cfg) for i in range(n_dialogues)]


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------

def load_woz_directory(path: str | Path) -> list[Dialogue]:
    """Reference adapter for WOZ-style JSON exports.

    Each ``*.json`` file holds an array of dialogues shaped like

        {"dialogue_idx": 0, "domain": "restaurant", "dialogue": [
            {"turn_idx": 0, "system_transcript": "", "transcript": "...",
             "system_acts": [...], "belief_state": [
                {"act": "inform", "slots": [["food", "thai"]]}]} , ...]}

    Packed turns are unpacked into alternating system/user turns; the first
    (empty) system transcript is dropped. ``belief_state`` inform entries
    become the cumulative state of the user turn; ``system_acts`` become the
    act annotation of the preceding system turn.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"adapter input directory not found: {path}")
    dialogues: list[Dialogue] = []
    for fp in sorted(path.glob("*.json")):
        raw = json.loads(fp.read_text(encoding="utf-8"))
        if not isinstance(raw, list):
            raise CorpusFormatError(f"{fp.name}: expected a JSON array of dialogues")
        for entry in raw:
            domain = entry.get("domain", "unknown")
            turns: list[Turn] = []
            for packed in entry["dialogue"]:
                sys_text = (packed.get("system_transcript") or "").strip()
                if sys_text:
                    acts = packed.get("system_acts") or None
                    acts_set = {str(a) for a in acts} if acts else None
                    turns.append(Turn(SYSTEM, sys_text, acts=acts_set))
                usr_text = (packed.get("transcript") or "").strip()
                if usr_text:
                    state: dict[str, str] = {}
                    for bs in packed.get("belief_state", []):
                        if bs.get("act") != "inform":
                            continue
                        for slot, value in bs.get("slots", []):
                            state[f"{domain}-{slot}"] = str(value)
                    turns.append(Turn(USER, usr_text, state=state or None))
            if not turns:
                continue
            dialogues.append(Dialogue(
                id=f"{fp.stem}-{entry['dialogue_idx']}",
                domains={domain},
                turns=turns,
            ))
    return dialogues


ADAPTERS: dict[str, Callable[[Path], list[Dialogue]]] = {
    "woz": load_woz_directory,
}


def run_adapter(name: str, in_dir: str | Path) -> list[Dialogue]:
    if name not in ADAPTERS:
        raise ValueError(f"unknown adapter {name!r}; available: {sorted(ADAPTERS)}")
    return ADAPTERS[name](Path(in_dir))
