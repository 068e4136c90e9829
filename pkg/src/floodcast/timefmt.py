"""ISO-8601 UTC timestamps <-> numpy datetime64[s]."""
from datetime import datetime, timezone

import numpy as np

HOUR = np.timedelta64(3600, "s")


def parse_time(text) -> np.datetime64:
    if isinstance(text, np.datetime64):
        return text.astype("datetime64[s]")
    if isinstance(text, datetime):
        dt = text
    else:
        s = str(text).strip()
        if s.endswith("Z") or s.endswith("z"):
            s = s[:-1] + "+00:00"
        dt = datetime.fromisoformat(s)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def format_time(t) -> str:
    return str(np.datetime64(t, "s")) + "Z"


def floor_hour(t):
    """Floor datetime64 value(s) to the hour."""
    return np.asarray(t, dtype="datetime64[s]").astype("datetime64[h]").astype("datetime64[s]")
