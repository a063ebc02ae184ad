from .base import (
    Captioner,
    Denoiser,
    LatentCodec,
    SiteInfo,
    TextCondition,
    TextConditioner,
    classifier_free_guidance,
    site_key,
)
from .mock import MockCaptioner, MockCodec, MockDenoiser, MockTextConditioner, OracleDenoiser
from .service import (
    DiffusionServiceDenoiser,
    HttpCaptioner,
    ServiceCodec,
    ServiceTextConditioner,
    serve_backend,
)

__all__ = [
    "Captioner", "Denoiser", "LatentCodec", "SiteInfo", "TextCondition", "TextConditioner",
    "classifier_free_guidance", "site_key",
    "MockCaptioner", "MockCodec", "MockDenoiser", "MockTextConditioner", "OracleDenoiser",
    "DiffusionServiceDenoiser", "HttpCaptioner", "ServiceCodec", "ServiceTextConditioner", "serve_backend",
]
