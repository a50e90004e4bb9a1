"""CHAT (.cha) transcript parsing and participant-speech cleaning.

Only main-tier lines of the participant speaker (``*PAR`` by default)
survive. Cleaning strips CHAT annotation so the remaining text is what
the speaker said, in scoring-ready form.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

LABELS = ("dementia", "control", "unknown")
_LABEL_ALIASES = {
    "dementia": "dementia", "ad": "dementia", "probablead": "dementia", "1": "dementia",
    "control": "control", "cc": "control", "hc": "control", "healthy": "control", "0": "control",
    "unknown": "unknown", "": "unknown",
}


class ChatFormatError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class CleanRuleSet:
    """Which CHAT constructs to strip. ``version`` is recorded in outputs."""

    version: str = "1"
    participant_tier: str = "PAR"
    unintelligible: bool = True
    events: bool = True
    bracket_annotations: bool = True
    pauses: bool = True
    special_form_suffixes: bool = True
    omitted_words: bool = True
    time_marks: bool = True
    join_with: str = " "

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_RULES = CleanRuleSet()


@dataclass
class Transcript:
    id: str
    label: str
    utterances: list
    corpus: str = ""
    speaker: str = "PAR"
    split: str = ""
    metadata: dict = field(default_factory=dict)

    def text(self, join_with: str = " ") -> str:
        return join_with.join(u for u in self.utterances if u)

    def to_json(self, join_with: str = " ") -> str:
        record = {"id": self.id, "label": self.label, "split": self.split,
                  "text": self.text(join_with)}
        return json.dumps(record, ensure_ascii=False, sort_keys=True)


def normalise_label(raw: str) -> str:
    key = re.sub(r"[\s_-]", "", str(raw)).lower()
    if key not in _LABEL_ALIASES:
        raise ValueError(f"unrecognised label {raw!r}")
    return _LABEL_ALIASES[key]


# parsing --------------------------------------------------------------------

_TIER = re.compile(r"^([*%])([A-Za-z0-9]+):(?:\t| |$)(.*)$")


def parse_chat_lines(lines, path="<string>") -> list:
    """Ordered ``(tier, text)`` pairs; tiers are ``*PAR``, ``%mor``, ``@ID`` etc."""
    out = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if lineno == 1:
            line = line.lstrip("﻿")
        if not line.strip():
            continue
        if line[0] == "\t":
            if not out:
                raise ChatFormatError(path, lineno, "continuation line before any tier")
            tier, text = out[-1]
            out[-1] = (tier, f"{text} {line.strip()}".strip())
            continue
        if line[0] == "@":
            name, sep, value = line.partition(":")
            out.append((name, value.strip() if sep else ""))
            continue
        m = _TIER.match(line)
        if not m:
            raise ChatFormatError(path, lineno, f"unrecognised line {line[:40]!r}")
        out.append((m.group(1) + m.group(2), m.group(3).strip()))
    return out


def parse_chat(path) -> list:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_chat_lines(fh, path=str(path))


# cleaning -------------------------------------------------------------------

_TIME_MARK = re.compile(r"\x15[^\x15]*\x15")
_BRACKETS = re.compile(r"\[[^\[\]]*\]")
_PAUSE = re.compile(r"\(\s*(?:\.{1,3}|\d+(?:\.\d*)?|\d*:\d+(?:\.\d*)?)\s*\)")
_EVENT = re.compile(r"(?<!\S)&\S*")
_UNINTELLIGIBLE = re.compile(r"(?<!\S)(?:xxx|yyy|www|xx|yy)(?:@\S*)?(?!\S)", re.IGNORECASE)
_OMITTED = re.compile(r"(?<!\S)0\S*")
_SUFFIX = re.compile(r"(?<=\w)@[A-Za-z:$]*")
_LINKER = re.compile(r"(?<!\S)\+\S*")
_SYMBOLS = re.compile(r"[<>↑↓≠≈‡„ˈˌ‹›⌈⌉⌊⌋°☺♋⁇∙∾≋]")
_LENGTHEN = re.compile(r"(?<=\w):(?=\w)|(?<=\w):(?!\S)")
_PARENS = re.compile(r"[()]")
_SPACE = re.compile(r"\s+")


def _terminator(match) -> str:
    token = match.group(0)
    if token.endswith("?"):
        return " ?"
    if token.endswith("!"):
        return " !"
    if token.endswith("."):
        return " ."
    return " "


def clean_utterance(text: str, rules: CleanRuleSet = DEFAULT_RULES) -> str:
    """Strip CHAT markup from one main-tier utterance.

    >>> clean_utterance("the boy &=laughs is falling .")
    'the boy is falling .'
    >>> clean_utterance("xxx the (.) cookie [//] cookies .")
    'the cookie cookies .'
    """
    s = text
    if rules.time_marks:
        s = _TIME_MARK.sub(" ", s)
    if rules.bracket_annotations:
        prev = None
        while prev != s:
            prev, s = s, _BRACKETS.sub(" ", s)
    if rules.pauses:
        s = _PAUSE.sub(" ", s)
    # Character-level markup first so that token rules see final word forms.
    s = _SYMBOLS.sub(" ", s)
    s = _LENGTHEN.sub("", s)
    s = _PARENS.sub("", s)
    s = s.replace("_", " ")
    s = _LINKER.sub(_terminator, s)
    if rules.events:
        s = _EVENT.sub(" ", s)
    if rules.special_form_suffixes:
        s = _SUFFIX.sub("", s)
    if rules.unintelligible:
        s = _UNINTELLIGIBLE.sub(" ", s)
    if rules.omitted_words:
        s = _OMITTED.sub(" ", s)
    s = _SPACE.sub(" ", s).strip()
    # A terminator left with no words before it carries no speech.
    if re.fullmatch(r"[.?!,\s]*", s):
        return ""
    return s


def participant_utterances(tiers, rules: CleanRuleSet = DEFAULT_RULES) -> list:
    wanted = "*" + rules.participant_tier
    out = []
    for tier, text in tiers:
        if tier != wanted:
            continue
        cleaned = clean_utterance(text, rules)
        if cleaned:
            out.append(cleaned)
    return out


def load_transcript(path, label: str = "unknown", rules: CleanRuleSet = DEFAULT_RULES,
                    corpus: str = "", split: str = "") -> Transcript:
    path = Path(path)
    utterances = participant_utterances(parse_chat(path), rules)
    return Transcript(id=path.stem, label=label, utterances=utterances, corpus=corpus,
                      speaker=rules.participant_tier, split=split,
                      metadata={"rules_version": rules.version, "source": path.name})


# corpora --------------------------------------------------------------------

_EXPECT = re.compile(r"#\s*expect\s+(.*)", re.IGNORECASE)


def read_manifest(path) -> tuple[list, dict]:
    """Rows ``(id, label, split)`` and declared counts from a label manifest CSV.

    Lines starting with ``#`` are comments; ``# expect train=108 test=48``
    (or ``label=count``, ``split/label=count``) declares expected totals.
    """
    path = Path(path)
    rows, expected = [], {}
    data_lines = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.lstrip().startswith("#"):
                m = _EXPECT.match(line.strip())
                if m:
                    for item in m.group(1).replace(",", " ").split():
                        key, _, value = item.partition("=")
                        expected[key.strip()] = int(value)
                continue
            if line.strip():
                data_lines.append(line)
    reader = csv.DictReader(data_lines)
    if reader.fieldnames is None or "id" not in reader.fieldnames or "label" not in reader.fieldnames:
        raise ValueError(f"{path}: manifest needs 'id' and 'label' columns")
    for rec in reader:
        rows.append((rec["id"].strip(), normalise_label(rec.get("label", "")),
                     (rec.get("split") or "").strip()))
    return rows, expected


def _counts(transcripts) -> dict:
    counts = {}
    for t in transcripts:
        for key in (t.split, t.label, f"{t.split}/{t.label}"):
            if key and key != "/":
                counts[key] = counts.get(key, 0) + 1
    return counts


def load_corpus(directory, label_manifest=None, rules: CleanRuleSet = DEFAULT_RULES,
                corpus: str = "", splits=None) -> list:
    """Load every ``.cha`` file under ``directory`` with labels from the manifest.

    Files missing from the manifest are kept with label ``unknown`` (and a
    warning); manifest entries with no file are an error. ``splits`` limits
    the result to those splits.
    """
    directory = Path(directory)
    files = {p.stem: p for p in sorted(directory.rglob("*.cha"))}
    if not files and label_manifest is None:
        logger.warning("no .cha files under %s", directory)
        return []
    rows, expected = ([], {}) if label_manifest is None else read_manifest(label_manifest)
    labelled = {}
    for ident, label, split in rows:
        if ident not in files:
            raise FileNotFoundError(f"manifest entry {ident!r} has no .cha file under {directory}")
        labelled[ident] = (label, split)
    if not files:
        logger.warning("no .cha files under %s", directory)
    out = []
    for ident in sorted(files):
        if ident in labelled:
            label, split = labelled[ident]
        else:
            logger.warning("%s is not in the label manifest; marking unknown", ident)
            label, split = "unknown", ""
        if splits is not None and split not in splits:
            continue
        out.append(load_transcript(files[ident], label, rules, corpus=corpus, split=split))
    counts = _counts(out)
    for key, want in expected.items():
        split_key = key.split("/")[0]
        if splits is not None and split_key not in splits and key not in LABELS:
            continue
        got = counts.get(key, 0)
        if got != want:
            raise ValueError(f"manifest expects {want} transcripts for {key!r}, found {got}")
    logger.info("loaded %d transcripts from %s: %s", len(out), directory, counts)
    return out


def write_jsonl(transcripts, path, join_with: str = " ", meta: dict | None = None) -> None:
    """One JSON record per transcript; ``meta`` becomes a leading ``{"_meta": ...}`` record."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}, ensure_ascii=False, sort_keys=True) + "\n")
        for t in transcripts:
            fh.write(t.to_json(join_with) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            rec = json.loads(line)
            if "_meta" in rec:
                continue
            out.append(Transcript(id=rec["id"], label=rec.get("label", "unknown"),
                                  utterances=[rec["text"]] if rec.get("text") else [],
                                  split=rec.get("split", "")))
    return out
