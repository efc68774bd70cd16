import gc
import weakref

import pytest

from conftest import tiny_samples
from proxytta.data import SampleStream, stream_batches
from proxytta.errors import ConfigurationError, StreamProtocolError


def test_batch_sizes_partition_the_dataset():
    samples = tiny_samples(10)
    sizes = [len(b) for b in stream_batches(samples, 4)]
    assert sizes == [4, 4, 2]


def test_each_sample_appears_exactly_once():
    samples = tiny_samples(11)
    seen = []
    for batch in stream_batches(samples, 3):
        seen.extend(batch.sample_ids)
    assert sorted(seen) == list(range(11))
    assert len(set(seen)) == 11


def test_second_pass_raises_protocol_error():
    stream = stream_batches(tiny_samples(6), 2)
    list(stream)
    with pytest.raises(StreamProtocolError):
        iter(stream)


def test_next_after_exhaustion_raises_protocol_error():
    stream = stream_batches(tiny_samples(4), 2)
    it = iter(stream)
    next(it)
    next(it)
    with pytest.raises(StopIteration):
        next(it)
    with pytest.raises(StreamProtocolError):
        next(it)


def test_bad_batch_size_rejected():
    with pytest.raises(ConfigurationError):
        stream_batches(tiny_samples(2), 0)


def test_stream_is_lazy_and_memory_bounded():
    """A consumer that drops its batch before requesting the next one never
    keeps more than one batch of samples alive."""
    refs = []

    def source(n):
        for i in range(n):
            s = tiny_samples(1, seed0=i)[0]
            refs.append(weakref.ref(s))
            yield s

    batch_size = 3
    stream = stream_batches(source(12), batch_size)
    peak = 0
    it = iter(stream)
    while True:
        alive = sum(1 for r in refs if r() is not None)
        peak = max(peak, alive)
        try:
            batch = next(it)
        except StopIteration:
            break
        assert len(batch) <= batch_size
        del batch
        gc.collect()
    assert peak <= batch_size
