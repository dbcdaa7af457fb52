"""Shared fixtures: a tiny on-disk tone corpus and its feature stats.

Thread pinning must happen before numpy is imported anywhere in the
process, which is why it sits at the top of this file.
"""

import os

for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
           "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_v, "1")

from types import SimpleNamespace

import numpy as np
import pytest

from kwspot.dataio import ManifestEntry, save_manifest, write_wav
from kwspot.features import FeatureConfig, compute_cmvn

SR = 8000


def tone_word(freqs, dur=0.30, sr=SR):
    seg = int(sr * dur / len(freqs))
    t = np.arange(seg) / sr
    return np.concatenate([0.3 * np.sin(2 * np.pi * f * t) for f in freqs])


@pytest.fixture(scope="session")
def tone_corpus(tmp_path_factory):
    """Two tone-sequence keywords plus noise negatives, written once per run.

    Big enough to train a tiny model for a few epochs, small enough that
    building it takes well under a second.
    """
    root = tmp_path_factory.mktemp("tone_corpus")
    rng = np.random.default_rng(11)
    fcfg = FeatureConfig(sample_rate=SR, num_mels=20)
    words = {0: tone_word([500, 900, 1400]), 1: tone_word([1800, 700, 1200])}

    def positive(kw, i):
        w = words[kw]
        lead = int(rng.integers(400, 2400))
        tail = int(rng.integers(400, 2400))
        sig = np.concatenate([np.zeros(lead), w, np.zeros(tail)])
        sig += 0.01 * rng.standard_normal(sig.shape[0])
        path = root / f"kw{kw}_{i}.wav"
        write_wav(str(path), sig.astype(np.float32), SR)
        end = max(1, int(((lead + w.shape[0]) / SR) * 1000 / fcfg.shift_ms))
        frames = max(1, int((w.shape[0] / SR) * 1000 / fcfg.shift_ms))
        return ManifestEntry(key=f"kw{kw}_{i}", wav=str(path), label=kw,
                             end_frame=end, duration_frames=frames)

    def negative(i, seconds=1.2):
        sig = 0.05 * rng.standard_normal(int(SR * seconds))
        path = root / f"neg_{i}.wav"
        write_wav(str(path), sig.astype(np.float32), SR)
        return ManifestEntry(key=f"neg_{i}", wav=str(path), label=-1)

    train = [positive(k, i) for k in (0, 1) for i in range(8)]
    train += [negative(i) for i in range(10)]
    dev = [positive(k, 100 + i) for k in (0, 1) for i in range(3)]
    dev += [negative(100 + i) for i in range(4)]
    train_manifest = root / "train.jsonl"
    dev_manifest = root / "dev.jsonl"
    save_manifest(train, str(train_manifest))
    save_manifest(dev, str(dev_manifest))
    return SimpleNamespace(
        root=root,
        fcfg=fcfg,
        train=train,
        dev=dev,
        train_manifest=str(train_manifest),
        dev_manifest=str(dev_manifest),
        keywords=("alpha", "bravo"),
    )


@pytest.fixture(scope="session")
def tone_cmvn(tone_corpus):
    return compute_cmvn(tone_corpus.train, tone_corpus.fcfg)
