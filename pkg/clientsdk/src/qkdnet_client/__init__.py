from .client import ClientSession, ServiceError, TranscriptRecorder, TransportError

__all__ = [
    "ClientSession",
    "ServiceError",
    "TransportError",
    "TranscriptRecorder",
]

__version__ = "0.1.0"
