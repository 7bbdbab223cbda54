from .settings_base import AppSettings


class QaSettings(AppSettings):
    """QA defaults: tearing solver on a small pool to exercise the parallel path."""

    host: str = "0.0.0.0"
    port: int = 8080
    solver: str = "ieti"
    workers: int = 2


settings = QaSettings()
