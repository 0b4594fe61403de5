"""
Local development server with auto-reload.
Run with: uv run python run_local.py  (or `bner serve` without reload)
"""
import uvicorn

from app.config import settings

if __name__ == "__main__":
    uvicorn.run(
        "app.main:app",
        host="127.0.0.1",
        port=8000,
        reload=True,
        reload_excludes=[".venv/*", "*.pyc", "__pycache__/*", "out/*", "data/*"],
        log_level=settings.log_level.lower(),
    )
