import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.api import checks, experiments, scenes
from app.core.config import get_settings
from app.utils.errors import register_exception_handlers
from app.utils.logger import configure_logging

logger = logging.getLogger(__name__)

VERSION = "1.0.0"


def create_app() -> FastAPI:
    settings = get_settings()
    configure_logging(settings.log_level)

    app = FastAPI(
        title="protoocc-desk API",
        description="Scene previews, verification suites and checkpoint evaluation",
        version=VERSION,
        openapi_tags=[
            {"name": "Scenes", "description": "Synthetic scene generation"},
            {"name": "Checks", "description": "Gradient and oracle verification suites"},
            {"name": "Experiments", "description": "Checkpoint evaluation and ablation presets"},
        ],
    )

    # Global exception handling
    register_exception_handlers(app)

    # CORS
    app.add_middleware(
        CORSMiddleware,
        allow_origins=settings.allowed_origins,
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    # Include routers
    app.include_router(scenes.router, prefix="/api/scenes", tags=["Scenes"])
    app.include_router(checks.router, prefix="/api/checks", tags=["Checks"])
    app.include_router(experiments.router, prefix="/api/experiments", tags=["Experiments"])

    @app.get("/api/health")
    async def health():
        return {"status": "ok", "version": VERSION}

    return app


app = create_app()
