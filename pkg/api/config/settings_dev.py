from .settings_base import AppSettings


class DevSettings(AppSettings):
    """Development defaults for local runs."""

    host: str = "127.0.0.1"
    port: int = 8000
    log_level: str = "DEBUG"


settings = DevSettings()
