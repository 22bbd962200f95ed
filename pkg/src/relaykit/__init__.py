"""relaykit: framed messaging protocol, go-back-N reliability, relay server."""

from .channel import ChannelConfig, InFlight, LossyChannel, ZeroSeedError, rng_next
from .gbn import (
    GbnReceiver,
    GbnSender,
    SegKind,
    Segment,
    TransferStats,
    WindowFull,
    ack_segment,
    data_segment,
    decode_segment,
    encode_segment,
    run_transfer,
)
from .matmul import DimensionMismatch, Matrix, matmul_parallel, matmul_serial
from .server import Registry, RelayServer, ServerConfig
from .wire import (
    BadMagic,
    ChecksumMismatch,
    ErrorCode,
    Frame,
    HandshakeParams,
    LengthMismatch,
    MsgKind,
    ProtocolError,
    UnknownKind,
    VersionMismatch,
    decode_frame,
    encode_frame,
    negotiate,
)

__version__ = "0.1.0"
