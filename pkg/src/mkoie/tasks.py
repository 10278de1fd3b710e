from __future__ import annotations

import enum


class TaskKind(enum.IntEnum):
    """Restoration task selector. The integer values index the task-specific paths."""

    ID = 1  # daytime dehazing
    LLIE = 2  # low-light enhancement
    NHIE = 3  # nighttime haze enhancement

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "TaskKind":
        """Accept a TaskKind, its integer value, or its (case-insensitive) name."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip()
            if key.isdigit():
                value = int(key)
            else:
                try:
                    return cls[key.upper()]
                except KeyError:
                    raise ValueError(
                        f"unknown task {value!r}; expected one of "
                        f"{', '.join(t.slug for t in cls)}"
                    ) from None
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            raise ValueError(f"unknown task {value!r}; expected 1, 2 or 3") from None


ALL_TASKS = (TaskKind.ID, TaskKind.LLIE, TaskKind.NHIE)
