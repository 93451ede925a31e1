"""
fedcmd-sim federated learning simulator

(C) 2024

error hierarchy

exit_code is what the command line returns when the error escapes:
2 for configuration / validation problems, 3 for numeric failure.
"""


class FedError(Exception):
    exit_code = 2


class ConfigError(FedError):
    pass


class DatasetError(FedError):
    pass


class IdxFormatError(DatasetError):
    """Bad magic number or unsupported IDX layout."""


class IdxTruncatedError(DatasetError):
    """File ended before the declared item count."""


class IdxCountMismatchError(DatasetError):
    """Image and label files disagree on the number of items."""


class PartitionError(FedError):
    pass


class ModelError(FedError):
    pass


class ShapeError(ModelError):
    pass


class LayerError(ModelError):
    pass


class CheckpointError(FedError):
    pass


class ProtocolError(FedError):
    pass


class SummaryError(FedError):
    """Empty or non-finite input to a distribution fit."""


class NumericError(FedError):
    exit_code = 3

    def __init__(self, message, layer=None, client_id=None):
        self.layer = layer
        self.client_id = client_id
        if client_id is not None:
            message = 'client {}: {}'.format(client_id, message)
        super().__init__(message)

    def tagged(self, client_id):
        """Same failure re-raised with the client id in front."""
        return NumericError(str(self), layer=self.layer, client_id=client_id)
