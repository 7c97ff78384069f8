from __future__ import annotations


class ValidationError(ValueError):
    """Invalid input: carries the offending key and value."""

    def __init__(self, key: str, value: object, detail: str) -> None:
        self.key = key
        self.value = value
        self.detail = detail
        super().__init__(f"{key}={value!r}: {detail}")


class UnsupportedDesignError(ValidationError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, operation: str, detail: str) -> None:
        self.operation = operation
        self.detail = detail
        super().__init__(f"{operation} failed: {detail}")


def require_probability(key: str, value: float, *, open_interval: bool = True) -> float:
    value = float(value)
    if open_interval:
        ok = 0.0 < value < 1.0
        bounds = "(0, 1)"
    else:
        ok = 0.0 <= value <= 1.0
        bounds = "[0, 1]"
    if not ok:
        raise ValidationError(key, value, f"must lie in {bounds}")
    return value
