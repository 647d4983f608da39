"""Client side of the GRIN protocol: rate limiting, wire codec, typed operations."""

from .client import (
    DEFAULT_BASE_URL,
    UNKNOWN,
    ConversionResult,
    CredentialError,
    CredentialProvider,
    DownloadResult,
    Endpoint,
    EndpointKind,
    GrinClient,
    GrinError,
    IntegrityError,
    PackageNotAvailable,
    PackageProbe,
    StaticTokenProvider,
    TransientError,
    validate_barcode,
)
from .codec import (
    CONDITION_FIELDS,
    DATE_FIELDS,
    GrinState,
    ListingCodec,
    TsvListingCodec,
    VolumeListing,
)
from .limiter import RateBudget, RateLimiter, RateLimitTimeout, RetryPolicy, SlidingWindow
