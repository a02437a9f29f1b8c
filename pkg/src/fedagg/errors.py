"""Exception taxonomy shared across the aggregation service."""

from __future__ import annotations


class FedAggError(Exception):
    """Base class for all errors raised by this package."""


# --- codec -----------------------------------------------------------------

class CodecError(FedAggError):
    """A byte record could not be decoded."""


class BadMagic(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class ChecksumMismatch(CodecError):
    pass


class Truncated(CodecError):
    pass


# --- schema / fusion --------------------------------------------------------

class SchemaMismatch(FedAggError):
    """Two model schemas are not fusable; message names the first difference."""


class EmptyAggregate(FedAggError):
    pass


class NonFiniteValue(FedAggError):
    pass


# --- dispatch / engines -----------------------------------------------------

class CapacityExceeded(FedAggError):
    """Workload is Large but no distributed backend is available."""


class EmptyInput(FedAggError):
    pass


class MemoryCapExceeded(FedAggError):
    """Engine-level refusal: input exceeds the engine's own memory cap."""


class OversizedEntry(FedAggError):
    """A single blob is larger than the per-worker memory budget."""

    def __init__(self, key: str, size: int, budget: int):
        super().__init__(f"entry {key!r} ({size} bytes) exceeds worker budget ({budget} bytes)")
        self.key = key


class StoreReadError(FedAggError):
    def __init__(self, key: str, reason: str = "not found"):
        super().__init__(f"cannot read {key!r}: {reason}")
        self.key = key


class MissingPartition(FedAggError):
    def __init__(self, partition_id: int):
        super().__init__(f"no result for partition {partition_id}")
        self.partition_id = partition_id


class DuplicatePartition(FedAggError):
    def __init__(self, partition_id: int):
        super().__init__(f"duplicate result for partition {partition_id}")
        self.partition_id = partition_id


class JobFailed(FedAggError):
    def __init__(self, partition_id: int, attempts: int, reason: str):
        super().__init__(
            f"partition {partition_id} failed after {attempts} attempts: {reason}"
        )
        self.partition_id = partition_id
        self.attempts = attempts


class NoWorkers(FedAggError):
    pass


# --- store -------------------------------------------------------------------

class DuplicateKey(FedAggError):
    """A second atomic put to an existing key; committed blobs are immutable."""

    def __init__(self, key: str):
        super().__init__(f"key already committed: {key!r}")
        self.key = key


class DuplicateUpdate(FedAggError):
    def __init__(self, round_no: int, client_id: str):
        super().__init__(f"client {client_id!r} already submitted for round {round_no}")
        self.client_id = client_id


class ValidationFailed(FedAggError):
    pass


class StoreUnavailable(FedAggError):
    pass


class NotYetPublished(FedAggError):
    def __init__(self, round_no: int):
        super().__init__(f"no global model published for round {round_no}")
        self.round_no = round_no


# --- coordinator --------------------------------------------------------------

class InsufficientParties(FedAggError):
    def __init__(self, count: int, min_parties: int):
        super().__init__(f"round timed out with {count} updates (< min_parties {min_parties})")
        self.count = count


class WrongMode(FedAggError):
    """Direct upload refused because the round runs in Store submission mode."""


class RoundClosed(FedAggError):
    """Submission arrived for a round no longer collecting; resubmit next round."""


# --- simbench ------------------------------------------------------------------

class TargetUnavailable(FedAggError):
    pass


class MalformedCsv(FedAggError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"bench csv line {line_no}: {reason}")
        self.line_no = line_no
