"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class FullyMaskedRowError(ValueError):
    """A softmax or attention row has no admissible position."""

    def __init__(self, row, where="masked_softmax"):
        self.row = row
        super().__init__(f"{where}: fully masked row {row}")


class TapeError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name, bad):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r} ({bad} bad entries)")


class ConfigError(ValueError):
    """Bad experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
