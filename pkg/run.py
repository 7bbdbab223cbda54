#!/usr/bin/env python
"""Development server runner."""

import uvicorn

from api.config.settings import settings

if __name__ == "__main__":
    uvicorn.run(
        "api.main:app",
        host=settings.host,
        port=settings.port,
        reload=True
    )
