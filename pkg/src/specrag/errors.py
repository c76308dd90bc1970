"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SpecRagError(Exception):
    code = "ERROR"
    exit_code = 1


class ConfigError(SpecRagError):
    code = "CONFIG"
    exit_code = 2


class MalformedDocument(SpecRagError):
    code = "MALFORMED_DOCUMENT"
    exit_code = 3


class NotOpenApi(SpecRagError):
    code = "NOT_OPENAPI"
    exit_code = 3


class EndpointNotFound(SpecRagError, KeyError):
    code = "ENDPOINT_NOT_FOUND"
    exit_code = 3

    def __init__(self, verb, path, nearest=None):
        self.verb = verb
        self.path = path
        self.nearest = nearest
        msg = f"no endpoint {verb} {path}"
        if nearest:
            msg += f"; closest existing path is {nearest}"
        super().__init__(msg)

    def __str__(self):
        return self.args[0]


class InvalidChunkParams(SpecRagError, ValueError):
    code = "INVALID_CHUNK_PARAMS"
    exit_code = 4


class StrategyCombinationInvalid(SpecRagError, ValueError):
    code = "STRATEGY_COMBINATION_INVALID"
    exit_code = 4


class ProviderUnavailable(SpecRagError):
    code = "PROVIDER_UNAVAILABLE"
    exit_code = 5


class InputTooLong(SpecRagError):
    code = "INPUT_TOO_LONG"
    exit_code = 5


class EmptyCompletion(SpecRagError):
    code = "EMPTY_COMPLETION"
    exit_code = 5


class ProtocolError(SpecRagError):
    code = "PROTOCOL_ERROR"
    exit_code = 5


class ScriptDivergence(ProtocolError):
    code = "SCRIPT_DIVERGENCE"


class EmptyCorpus(SpecRagError, ValueError):
    code = "EMPTY_CORPUS"
    exit_code = 6


class DuplicateChunkId(SpecRagError, ValueError):
    code = "DUPLICATE_CHUNK_ID"
    exit_code = 6


class ProviderMismatch(SpecRagError):
    code = "PROVIDER_MISMATCH"
    exit_code = 6


class FormatVersionMismatch(SpecRagError):
    code = "FORMAT_VERSION_MISMATCH"
    exit_code = 6


class CorruptIndex(SpecRagError):
    code = "CORRUPT_INDEX"
    exit_code = 6


class MalformedBenchmark(SpecRagError):
    code = "MALFORMED_BENCHMARK"
    exit_code = 7


class EmptyGold(SpecRagError, ValueError):
    code = "EMPTY_GOLD"
    exit_code = 7
