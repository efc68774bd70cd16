"""Single-pass batch stream.

Test-time data arrives as an ordered stream of small batches; a consumer may
never revisit a batch. The handle enforces that contract: it can be iterated
exactly once, and any attempt to re-consume raises StreamProtocolError.
"""

from dataclasses import dataclass

from ..errors import ConfigurationError, StreamProtocolError


@dataclass
class Batch:
    index: int
    sample_ids: list
    samples: list

    def __len__(self):
        return len(self.samples)


class SampleStream:
    """Single-consumer handle over an ordered dataset.

    Batches are materialized lazily from the underlying iterable, so a
    consumer that drops its batch reference between requests never holds more
    than one batch of samples.
    """

    def __init__(self, samples, batch_size):
        if batch_size < 1:
            raise ConfigurationError("stream batch_size must be >= 1")
        self._source = iter(samples)
        self._batch_size = batch_size
        self._next_index = 0
        self._next_sample_id = 0
        self._claimed = False
        self._finished = False

    @property
    def batch_size(self):
        return self._batch_size

    def __iter__(self):
        if self._claimed:
            raise StreamProtocolError("single-pass stream cannot be consumed twice")
        self._claimed = True
        return self

    def __next__(self):
        self._claimed = True
        if self._finished:
            raise StreamProtocolError(
                "stream exhausted: re-requesting consumed batches violates the single-pass contract"
            )
        samples = []
        for _ in range(self._batch_size):
            try:
                samples.append(next(self._source))
            except StopIteration:
                break
        if not samples:
            self._finished = True
            raise StopIteration
        ids = list(range(self._next_sample_id, self._next_sample_id + len(samples)))
        self._next_sample_id += len(samples)
        batch = Batch(index=self._next_index, sample_ids=ids, samples=samples)
        self._next_index += 1
        return batch


def stream_batches(samples, batch_size):
    """Wrap an ordered dataset in a single-pass SampleStream."""
    return SampleStream(samples, batch_size)
