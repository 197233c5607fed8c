"""Stand-in voice converters usable as external commands.

    python -m hvlad.converters identity SOURCE TARGET [TARGET ...] OUT
    python -m hvlad.converters warp     SOURCE TARGET [TARGET ...] OUT

``identity`` copies the source. ``warp`` mimics what a real converter leaves
behind: the target voice dominates, carried on the source's loudness
contour, while a frequency-warped and attenuated copy of the source
survives underneath.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import dsp

WARP_FACTOR = 1.12
SOURCE_GAIN = 0.3


def _rms(x):
    return float(np.sqrt(np.mean(x * x))) + 1e-12


def _smooth_envelope(x, rate, win_s=0.05):
    n = max(1, int(win_s * rate))
    k = np.ones(n) / n
    return np.convolve(np.abs(x), k, mode="same")


def identity_convert(source: dsp.Waveform, targets) -> dsp.Waveform:
    return dsp.Waveform(np.array(source.samples), source.sample_rate_hz)


def warp_convert(source: dsp.Waveform, targets, warp=WARP_FACTOR,
                 source_gain=SOURCE_GAIN) -> dsp.Waveform:
    rate = source.sample_rate_hz
    xs = np.asarray(source.samples, dtype=np.float64)
    n = len(xs)
    tgt = np.concatenate([dsp.resample_linear(t, rate).samples for t in targets])
    carrier = tgt[np.arange(n) % len(tgt)]
    env = _smooth_envelope(xs, rate)
    env /= env.max() + 1e-12
    dominant = carrier * env
    dominant /= _rms(dominant)
    # reading the source faster by `warp` scales every frequency by the same factor
    pos = (np.arange(n) * warp) % n
    warped = np.interp(pos, np.arange(n), xs)
    warped /= _rms(warped)
    out = dominant + source_gain * warped
    return dsp.Waveform(0.9 * out / np.max(np.abs(out)), rate)


CONVERTERS = {"identity": identity_convert, "warp": warp_convert}


def main(argv=None):
    ap = argparse.ArgumentParser(prog="python -m hvlad.converters", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("kind", choices=sorted(CONVERTERS))
    ap.add_argument("source")
    ap.add_argument("targets", nargs="+")
    ap.add_argument("out")
    args = ap.parse_args(argv)
    src = dsp.load_wav(args.source)
    tgts = [dsp.load_wav(t) for t in args.targets]
    dsp.write_wav(args.out, CONVERTERS[args.kind](src, tgts))
    return 0


if __name__ == "__main__":
    sys.exit(main())
