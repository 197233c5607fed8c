import shlex
import sys
from pathlib import Path

import mpmath
import numpy as np
import pytest

from hvlad import dsp, synth
from hvlad.data import (
    CorpusIndex,
    build_pairing_manifest,
    convert_manifest,
    converted_name,
    default_split_sizes,
    invoke_converter,
    manifest_from_text,
    manifest_to_text,
    read_manifest,
    render_command,
    scan_corpus,
    split_train_test,
    validate_manifest,
    write_manifest,
)
from hvlad.errors import BadOutput, ConverterFailed, EmptyCorpus, EmptySpeaker, SizeMismatch, TooFewSpeakers

PY = shlex.quote(sys.executable)
IDENTITY = f"{PY} -m hvlad.converters identity {{source}} {{targets}} {{out}}"


def fake_index(n_speakers, n_utts):
    speakers = [f"p{225 + i}" for i in range(n_speakers)]
    return CorpusIndex(speakers, {s: [f"/corpus/{s}/{s}_{u:03d}.wav" for u in range(n_utts)]
                                  for s in speakers})


def touch_tree(root, speakers, n_utts=2):
    for s in speakers:
        d = root / s
        d.mkdir(parents=True)
        for u in range(n_utts):
            (d / f"{s}_{u:03d}.wav").touch()
        (d / "notes.txt").touch()


@pytest.fixture(scope="module")
def full_manifest():
    return build_pairing_manifest(fake_index(108, 120), n_per_speaker=100, seed=7)


def test_vctk_shaped_tree(tmp_path):
    speakers = [f"p{n}" for n in range(225, 400) if n not in (280, 315)][:108] + ["p280", "p315"]
    touch_tree(tmp_path, speakers)
    index = scan_corpus(tmp_path)
    assert len(index.speakers) == 108
    assert "p280" not in index.speakers and "p315" not in index.speakers
    assert index.speakers == sorted(index.speakers)
    assert all(p.endswith(".wav") for p in index.utterances["p225"])
    assert scan_corpus(tmp_path) == index


def test_only_excluded_speakers(tmp_path):
    touch_tree(tmp_path, ["p280", "p315"])
    with pytest.raises(EmptyCorpus):
        scan_corpus(tmp_path)


def test_empty_speaker_directory(tmp_path):
    touch_tree(tmp_path, ["p225"])
    (tmp_path / "p226").mkdir()
    with pytest.raises(EmptySpeaker):
        scan_corpus(tmp_path)


def test_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        scan_corpus(tmp_path / "nope")


def test_full_pairing_protocol(full_manifest):
    m = full_manifest
    assert len(m.records) == 10800
    assert m.n_classes == 108
    validate_manifest(m)
    assert all(r.source_speaker != r.target_speaker for r in m.records)
    sources = [(r.source_speaker, r.source_utt) for r in m.records]
    assert len(set(sources)) == len(sources)
    for label, spk in enumerate(m.speakers[:5]):
        recs = [r for r in m.records if r.source_speaker == spk]
        assert len(recs) == 100 and all(r.label == label for r in recs)


def test_target_speakers_uniform(full_manifest):
    m = full_manifest
    counts = np.zeros(107)
    for r in m.records:
        others = [s for s in m.speakers if s != r.source_speaker]
        counts[others.index(r.target_speaker)] += 1
    expected = len(m.records) / 107
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 0.999 quantile of chi-square with 106 degrees of freedom
    crit = mpmath.findroot(lambda x: mpmath.gammainc(53, 0, x / 2, regularized=True) - 0.999, 150)
    assert chi2 < float(crit)


def test_two_speakers_forced_target():
    m = build_pairing_manifest(fake_index(2, 5), n_per_speaker=5, seed=1)
    assert all(r.target_speaker != r.source_speaker for r in m.records)
    assert {r.target_speaker for r in m.records if r.source_speaker == "p225"} == {"p226"}


@pytest.mark.parametrize("n_targets", [1, 2, 3])
def test_n_targets_from_one_speaker(n_targets):
    m = build_pairing_manifest(fake_index(4, 6), n_per_speaker=4, n_targets=n_targets, seed=2)
    for r in m.records:
        assert len(r.target_utts) == n_targets == len(set(r.target_utts))
        assert all(f"/{r.target_speaker}/" in t for t in r.target_utts)


def test_pairing_errors():
    with pytest.raises(TooFewSpeakers):
        build_pairing_manifest(fake_index(1, 5))
    with pytest.raises(ValueError):
        build_pairing_manifest(fake_index(3, 5), n_targets=4)


def test_short_speaker_takes_all(caplog):
    index = fake_index(3, 10)
    index.utterances["p226"] = index.utterances["p226"][:4]
    m = build_pairing_manifest(index, n_per_speaker=6, seed=0)
    assert sum(r.source_speaker == "p226" for r in m.records) == 4
    assert "p226" in caplog.text


def test_rerun_byte_identical(tmp_path):
    for name in ("a.jsonl", "b.jsonl"):
        m = split_train_test(build_pairing_manifest(fake_index(12, 20), n_per_speaker=10, seed=3),
                             *default_split_sizes(120), seed=3)
        write_manifest(tmp_path / name, m)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_split_sizes(full_manifest):
    m = split_train_test(full_manifest, 9000, 1800, seed=0)
    assert len(m.split_records("train")) == 9000
    assert len(m.split_records("test")) == 1800
    assert default_split_sizes(10800) == (9000, 1800)


def test_small_split_disjoint_and_reproducible():
    def run(seed):
        m = build_pairing_manifest(fake_index(2, 5), n_per_speaker=5, seed=0)
        return [r.split for r in split_train_test(m, 9, 1, seed=seed).records]

    splits = run(4)
    assert splits.count("train") == 9 and splits.count("test") == 1
    assert run(4) == splits
    with pytest.raises(SizeMismatch):
        split_train_test(build_pairing_manifest(fake_index(2, 5), n_per_speaker=5), 9, 2)


def test_manifest_round_trip(full_manifest):
    m = split_train_test(full_manifest, 9000, 1800, seed=1)
    m.converter_id = "warp"
    m.records[0].converted_path = "out/x.wav"
    text = manifest_to_text(m)
    assert manifest_from_text(text) == m
    assert manifest_to_text(manifest_from_text(text)) == text


def test_render_command():
    argv = render_command("conv --src {source} {targets} -o {out}", "a.wav", ["t1.wav", "t 2.wav"], "o.wav")
    assert argv == ["conv", "--src", "a.wav", "t1.wav", "t 2.wav", "-o", "o.wav"]
    assert render_command("c --t={targets}", "a", ["x", "y"], "o") == ["c", "--t=x,y"]


@pytest.fixture
def wav_tree(tmp_path):
    synth.write_corpus(tmp_path / "corpus", n_speakers=2, n_utts=2, min_s=0.3, max_s=0.4)
    return scan_corpus(tmp_path / "corpus")


def test_identity_converter_copies_source(wav_tree, tmp_path):
    m = build_pairing_manifest(wav_tree, n_per_speaker=1, seed=0)
    rec = m.records[0]
    out = tmp_path / "out.wav"
    invoke_converter(rec, IDENTITY, out)
    assert rec.converted_path == str(out)
    src = dsp.load_wav(rec.source_utt)
    np.testing.assert_array_equal(dsp.load_wav(out).samples, src.samples)


def test_failing_converter(wav_tree, tmp_path):
    rec = build_pairing_manifest(wav_tree, n_per_speaker=1).records[0]
    cmd = f"{PY} -c \"import sys; sys.stderr.write('model weights missing'); sys.exit(1)\" {{out}}"
    with pytest.raises(ConverterFailed) as info:
        invoke_converter(rec, cmd, tmp_path / "o.wav")
    assert info.value.returncode == 1
    assert "model weights missing" in str(info.value)
    with pytest.raises(ConverterFailed):
        invoke_converter(rec, str(tmp_path / "no-such-binary") + " {out}", tmp_path / "o.wav")


def test_bad_converter_output(wav_tree, tmp_path):
    rec = build_pairing_manifest(wav_tree, n_per_speaker=1).records[0]
    with pytest.raises(BadOutput):
        invoke_converter(rec, f"{PY} -c pass {{out}}", tmp_path / "none.wav")
    junk = f"{PY} -c \"import sys; open(sys.argv[1], 'w').write('junk')\" {{out}}"
    with pytest.raises(BadOutput):
        invoke_converter(rec, junk, tmp_path / "junk.wav")


def test_missing_source_file(wav_tree, tmp_path):
    rec = build_pairing_manifest(wav_tree, n_per_speaker=1).records[0]
    rec.source_utt = str(tmp_path / "gone.wav")
    with pytest.raises(FileNotFoundError):
        invoke_converter(rec, IDENTITY, tmp_path / "o.wav")


@pytest.mark.parametrize("jobs", [1, 2])
def test_convert_batch(wav_tree, tmp_path, jobs):
    m = build_pairing_manifest(wav_tree, n_per_speaker=2, seed=0)
    assert len(m.records) == 4
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, m)
    convert_manifest(m, IDENTITY, tmp_path / "conv", manifest_path=path, jobs=jobs,
                     converter_id="identity")
    back = read_manifest(path)
    assert back.converter_id == "identity"
    assert all(r.converted_path and Path(r.converted_path).exists() for r in back.records)
    assert [Path(r.converted_path).name for r in back.records] == [converted_name(r) for r in m.records]
    assert not list(tmp_path.glob(".manifest.jsonl.*"))
