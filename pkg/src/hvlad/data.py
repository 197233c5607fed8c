"""Corpus indexing, source/target pairing, external conversion and splitting.

A manifest is UTF-8 JSON lines: one header object followed by one object per
converted utterance. Everything random is driven by the manifest seed, so a
rerun with the same corpus and seed writes byte-identical files.
"""
from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import (
    AudioError,
    BadOutput,
    ConverterFailed,
    EmptyCorpus,
    EmptySpeaker,
    SizeMismatch,
    TooFewSpeakers,
)

log = logging.getLogger(__name__)

EXCLUDED_SPEAKERS = ("p280", "p315")
AUDIO_SUFFIXES = (".wav",)


@dataclass
class CorpusIndex:
    speakers: list
    utterances: dict  # speaker -> sorted list of paths (str)

    def n_utterances(self):
        return sum(len(v) for v in self.utterances.values())


@dataclass
class PairingRecord:
    source_speaker: str
    source_utt: str
    target_speaker: str
    target_utts: list
    label: int
    converted_path: str | None = None
    split: str | None = None


@dataclass
class PairingManifest:
    records: list
    seed: int
    n_per_speaker: int
    n_targets: int
    speakers: list = field(default_factory=list)
    converter_id: str | None = None

    def split_records(self, split):
        return [r for r in self.records if r.split == split]

    @property
    def n_classes(self):
        return len(self.speakers)


# -- corpus -----------------------------------------------------------------

def scan_corpus(root, exclude=EXCLUDED_SPEAKERS) -> CorpusIndex:
    """Index a speaker-per-directory tree (``root/<speaker>/*.wav``)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} does not exist")
    excluded = set(exclude)
    speakers, utterances = [], {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if d.name in excluded:
            continue
        files = sorted(str(f) for f in d.iterdir()
                       if f.is_file() and f.suffix.lower() in AUDIO_SUFFIXES)
        if not files:
            raise EmptySpeaker(f"speaker directory {d} holds no audio files")
        speakers.append(d.name)
        utterances[d.name] = files
    if not speakers:
        raise EmptyCorpus(f"no usable speaker directories under {root}")
    return CorpusIndex(speakers, utterances)


# -- pairing ----------------------------------------------------------------

def build_pairing_manifest(index: CorpusIndex, n_per_speaker=100, n_targets=1,
                           seed=0) -> PairingManifest:
    """Pick distinct source utterances per speaker and a random other-speaker target for each."""
    if len(index.speakers) < 2:
        raise TooFewSpeakers("pairing needs at least two speakers")
    if not 1 <= n_targets <= 3:
        raise ValueError("n_targets must be 1, 2 or 3")
    rng = np.random.default_rng(seed)
    speakers = list(index.speakers)
    records = []
    for label, spk in enumerate(speakers):
        utts = index.utterances[spk]
        take = n_per_speaker
        if len(utts) < n_per_speaker:
            log.warning("speaker %s has only %d utterances (< %d); using all of them",
                        spk, len(utts), n_per_speaker)
            take = len(utts)
        sources = rng.choice(len(utts), size=take, replace=False)
        others = [s for s in speakers if s != spk]
        for si in sources:
            tgt = others[int(rng.integers(len(others)))]
            pool = index.utterances[tgt]
            k = min(n_targets, len(pool))
            picks = rng.choice(len(pool), size=k, replace=False)
            records.append(PairingRecord(
                source_speaker=spk, source_utt=utts[int(si)], target_speaker=tgt,
                target_utts=[pool[int(p)] for p in picks], label=label))
    return PairingManifest(records, seed=seed, n_per_speaker=n_per_speaker,
                           n_targets=n_targets, speakers=speakers)


def split_train_test(manifest: PairingManifest, n_train=9000, n_test=1800, seed=0) -> PairingManifest:
    n = len(manifest.records)
    if n_train + n_test != n:
        raise SizeMismatch(f"n_train + n_test = {n_train + n_test} but manifest has {n} records")
    order = np.random.default_rng(seed).permutation(n)
    train = set(order[:n_train].tolist())
    for i, rec in enumerate(manifest.records):
        rec.split = "train" if i in train else "test"
    return manifest


def default_split_sizes(n_records):
    """Train/test sizes in the 9000:1800 proportion."""
    n_train = int(round(n_records * 9000 / 10800))
    return n_train, n_records - n_train


def validate_manifest(manifest: PairingManifest):
    seen = set()
    for r in manifest.records:
        if r.target_speaker == r.source_speaker:
            raise ValueError(f"record targets its own source speaker {r.source_speaker}")
        if not 1 <= len(r.target_utts) <= 3:
            raise ValueError("each record needs one to three target utterances")
        if manifest.speakers and not 0 <= r.label < len(manifest.speakers):
            raise ValueError(f"label {r.label} out of range")
        key = (r.source_speaker, r.source_utt)
        if key in seen:
            raise ValueError(f"source utterance {r.source_utt} used twice")
        seen.add(key)


# -- serialization ----------------------------------------------------------

_RECORD_FIELDS = ("source_speaker", "source_utt", "target_speaker", "target_utts",
                  "converted_path", "label", "split")


def manifest_to_text(manifest: PairingManifest) -> str:
    header = {"seed": manifest.seed, "n_per_speaker": manifest.n_per_speaker,
              "n_targets": manifest.n_targets, "converter_id": manifest.converter_id,
              "speakers": manifest.speakers}
    lines = [json.dumps(header, ensure_ascii=False)]
    for r in manifest.records:
        d = asdict(r)
        lines.append(json.dumps({k: d[k] for k in _RECORD_FIELDS}, ensure_ascii=False))
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str) -> PairingManifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty manifest")
    header = json.loads(lines[0])
    records = [PairingRecord(**json.loads(ln)) for ln in lines[1:]]
    speakers = header.get("speakers") or sorted({r.source_speaker for r in records})
    return PairingManifest(records, seed=header["seed"], n_per_speaker=header["n_per_speaker"],
                           n_targets=header["n_targets"], speakers=speakers,
                           converter_id=header.get("converter_id"))


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def write_manifest(path, manifest: PairingManifest):
    _atomic_write(path, manifest_to_text(manifest))


def read_manifest(path) -> PairingManifest:
    with open(path, encoding="utf-8") as f:
        return manifest_from_text(f.read())


# -- conversion client ------------------------------------------------------

def render_command(template: str, source, targets, out) -> list:
    """Split a command template and substitute placeholders.

    ``{targets}`` standing alone expands to one argument per target file.
    """
    argv = []
    for tok in shlex.split(template):
        if tok == "{targets}":
            argv.extend(str(t) for t in targets)
        else:
            argv.append(tok.replace("{source}", str(source))
                        .replace("{targets}", ",".join(str(t) for t in targets))
                        .replace("{out}", str(out)))
    return argv


def converted_name(record: PairingRecord) -> str:
    src = Path(record.source_utt).stem
    tgt = Path(record.target_utts[0]).stem
    return f"{record.source_speaker}__{src}__to__{tgt}.wav"


def invoke_converter(record: PairingRecord, converter: str, out_path, timeout=None) -> PairingRecord:
    """Run the external converter for one record and check what it wrote."""
    for p in [record.source_utt, *record.target_utts]:
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    argv = render_command(converter, record.source_utt, record.target_utts, out_path)
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except OSError as exc:
        raise ConverterFailed(f"could not start converter: {exc}") from exc
    if proc.returncode != 0:
        raise ConverterFailed(
            f"converter exited with status {proc.returncode} for {record.source_utt}: "
            f"{proc.stderr.strip()[-500:]}", returncode=proc.returncode, stderr=proc.stderr)
    if not os.path.exists(out_path) or os.path.getsize(out_path) == 0:
        raise BadOutput(f"converter produced no audio at {out_path}")
    try:
        dsp.load_wav(out_path)
    except AudioError as exc:
        raise BadOutput(f"converter output {out_path} is not readable audio: {exc}") from exc
    record.converted_path = str(out_path)
    return record


def convert_manifest(manifest: PairingManifest, converter: str, out_dir, manifest_path=None,
                     jobs=1, converter_id=None) -> PairingManifest:
    """Convert every record, optionally in parallel, then rewrite the manifest atomically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(rec):
        return invoke_converter(rec, converter, out_dir / converted_name(rec))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(one, manifest.records))
    else:
        for rec in manifest.records:
            one(rec)
    manifest.converter_id = converter_id or converter
    if manifest_path is not None:
        write_manifest(manifest_path, manifest)
    return manifest
