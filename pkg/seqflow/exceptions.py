class Invalid(Exception):
    pass


class DimensionMismatch(Invalid):
    pass


class ParseError(Invalid):
    pass


class CorruptFile(ParseError):
    pass


class VersionMismatch(CorruptFile):
    pass


class NumericFailure(ArithmeticError):
    pass
