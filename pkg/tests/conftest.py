import numpy as np
import pytest

from hvlad import converters, dsp, synth
from hvlad.data import PairingManifest, PairingRecord
from hvlad.model import EncoderConfig

TINY_TRUNK = (4, 4, 4, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(variant="hvlad", n_classes=4, K=3, n_bins=257, n_frames=28, **kw):
    kw.setdefault("trunk_channels", TINY_TRUNK)
    kw.setdefault("embed_dim", 8)
    return EncoderConfig(variant=variant, K=K, n_classes=n_classes, n_bins=n_bins,
                         n_frames=n_frames, **kw)


class MemoryCorpus:
    """Converted clips synthesized in memory, keyed by their fake path."""

    def __init__(self, n_speakers=4, n_utts=8, seed=0, duration_s=0.6, convert=converters.warp_convert):
        self.profiles = synth.make_profiles(n_speakers, seed=seed)
        rng = np.random.default_rng(seed + 1)
        raw = {p.name: [synth.synth_utterance(p, duration_s, rng) for _ in range(n_utts)]
               for p in self.profiles}
        self.audio = {}
        records = []
        names = [p.name for p in self.profiles]
        for label, spk in enumerate(names):
            for u in range(n_utts):
                tgt = names[(label + 1 + u % (len(names) - 1)) % len(names)]
                key = f"mem/{spk}_{u:03d}__to__{tgt}.wav"
                self.audio[key] = convert(raw[spk][u], [raw[tgt][u]])
                records.append(PairingRecord(spk, f"mem/{spk}_{u:03d}.wav", tgt,
                                             [f"mem/{tgt}_{u:03d}.wav"], label, key,
                                             "test" if u % 4 == 3 else "train"))
        self.manifest = PairingManifest(records, seed=seed, n_per_speaker=n_utts, n_targets=1,
                                        speakers=names, converter_id="warp")

    def loader(self, record):
        return self.audio[record.converted_path]


@pytest.fixture(scope="session")
def memory_corpus():
    return MemoryCorpus()


def sine(freq_hz, duration_s, rate=dsp.DEFAULT_SAMPLE_RATE, amp=0.5):
    t = np.arange(int(round(duration_s * rate))) / rate
    return dsp.Waveform(amp * np.sin(2 * np.pi * freq_hz * t), rate)
