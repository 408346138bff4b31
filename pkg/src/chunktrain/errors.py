"""Exception types shared across the package."""


class ChunktrainError(Exception):
    """Base class for all package errors."""


class GraphParseError(ChunktrainError):
    """Raised for malformed or unusable edge-list input."""


class GraphFormatError(ChunktrainError):
    """Raised for corrupt or mismatched binary graph/matrix files."""


class PartitionError(ChunktrainError):
    """Raised for infeasible partitioning requests or stale artifacts."""


class PlanError(ChunktrainError):
    """Raised for inconsistent communication-planning inputs."""


class SimulationError(ChunktrainError):
    """Raised when device-simulation state violates an internal invariant."""


class CheckpointMissingError(SimulationError):
    """Raised when a recomputation checkpoint was never stored.

    Carries the (layer, partition, chunk) triple that was requested.
    """

    def __init__(self, layer: int, partition: int, chunk: int):
        self.layer = layer
        self.partition = partition
        self.chunk = chunk
        super().__init__(
            f"no checkpoint stored for layer {layer}, "
            f"chunk ({partition}, {chunk}); run the forward pass first"
        )


class ConfigError(ChunktrainError):
    """Raised for invalid run configurations."""
