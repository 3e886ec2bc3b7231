from dataclasses import dataclass

import numpy as np
import pytest

from osa_transfer import dsp, physio
from osa_transfer.dataset import NightRecord
from osa_transfer.model import ModelConfig

TINY = ModelConfig(channels=(2, 3), embedding_dim=4, stem_pool=(4, 4))


@dataclass
class FakeNight:
    """Stand-in for NightData with short random segments; positives carry a bright band."""

    night_id: str
    values: np.ndarray
    labels: np.ndarray
    desat: np.ndarray
    delays: physio.DelayEstimate | None = None

    @property
    def features(self):
        return self

    @property
    def record(self):
        return NightRecord(self.night_id, self.night_id, None, None, None, [], 0.1,
                           extra={"scored_ahi": float(10 * self.labels.sum())})

    @property
    def windows(self):
        return [dsp.SegmentWindow(i, 10.0 * i) for i in range(len(self.labels))]

    @property
    def samples(self):
        return self.labels

    @property
    def y(self):
        return self.labels.astype(np.float32)

    def s_labels(self, delay_s):
        return self.desat.astype(np.float32)


def fake_nights(n, seed=0, segments=12, frames=32):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y = (rng.random(segments) < 0.4).astype(int)
        x = rng.standard_normal((segments, frames, 64)).astype(np.float32)
        x[y == 1, :, 20:40] += 1.5
        s = np.where(y == 1, 0.7, 0.0) + rng.uniform(0, 0.1, segments)
        s[rng.random(segments) < 0.2] = np.nan
        out.append(FakeNight(f"f{i:02d}", x, y, s, physio.DelayEstimate([20.0 + i], 20.0 + i)))
    return out


@pytest.fixture
def tiny_config():
    return TINY
