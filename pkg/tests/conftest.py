import numpy as np
import pytest
import torch

from noisetrace.audio import AudioClip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tone(freq, n, fs=16000, amp=0.5):
    return AudioClip(amp * np.sin(2 * np.pi * freq * np.arange(n) / fs), fs)
