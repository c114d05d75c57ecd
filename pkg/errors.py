"""Exception hierarchy shared by every module.

main.py maps UsageError to exit code 2 and any other SluError to exit code 1.
"""


class SluError(Exception):
    pass


class UsageError(SluError):
    pass


# --- corpus ---
class LengthMismatch(SluError):
    def __init__(self, line, detail=""):
        self.line = line
        super().__init__(f"length mismatch at line {line}" + (f": {detail}" if detail else ""))


class MalformedTag(SluError):
    def __init__(self, line, tag):
        self.line = line
        self.tag = tag
        super().__init__(f"malformed tag {tag!r} at line {line}")


class EmptyCorpus(SluError):
    def __init__(self):
        super().__init__("cannot build a vocabulary from an empty training split")


class SequenceTooLong(SluError):
    def __init__(self, index, length, max_len):
        self.index = index
        super().__init__(f"example {index} has {length} tokens, max_len is {max_len}")


class UnknownLabel(SluError):
    def __init__(self, kind, label):
        self.kind = kind
        self.label = label
        super().__init__(f"unknown {kind} label {label!r} (not seen in training)")


# --- numerics ---
class ShapeMismatch(SluError):
    pass


class AllMasked(SluError):
    def __init__(self, row):
        self.row = row
        super().__init__(f"softmax row {row} has no unmasked element")


class NonFiniteValue(SluError):
    def __init__(self, op):
        self.op = op
        super().__init__(f"non-finite value produced by {op}")


class GradMismatch(SluError):
    def __init__(self, name, index, analytic, numeric):
        self.name = name
        self.index = index
        self.analytic = analytic
        self.numeric = numeric
        super().__init__(
            f"gradient mismatch for {name}{list(index)}: analytic={analytic:.6g} numeric={numeric:.6g}"
        )


class MissingGrad(SluError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"parameter {name} has no gradient")


# --- model / training ---
class CalledAtInference(SluError):
    def __init__(self):
        super().__init__("the slot label generation decoder only runs in training mode")


class NonFiniteLoss(SluError):
    def __init__(self, epoch, step, breakdown=None):
        self.epoch = epoch
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {breakdown}")


# --- cli ---
class VocabMismatch(SluError):
    def __init__(self, expected, found):
        self.expected = expected
        self.found = found
        super().__init__(f"vocabulary hash {found} does not match checkpoint ({expected})")


class ConfigError(UsageError):
    def __init__(self, key, detail="unknown config key"):
        self.key = key
        super().__init__(f"{detail}: {key}")
