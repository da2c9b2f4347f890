# services/errors.py - HIERARQUIA DE ERROS
"""
Erros do pipeline de recomendação.

Cada classe transporta o exit code que o CLI devolve:
- 1: configuração inválida
- 2: artefacto / dependência em falta
- 3: violação de invariantes dos dados
"""

from __future__ import annotations
from pathlib import Path
from typing import Optional, Union


class SessRecError(Exception):
    """Base de todos os erros do sistema."""
    exit_code = 1


class ConfigError(SessRecError):
    exit_code = 1


class ConvergenceError(SessRecError):
    """Iteração (Katz, PageRank) não convergiu dentro do limite."""
    exit_code = 1


class MissingArtifactError(SessRecError):
    exit_code = 2

    def __init__(self, path: Union[str, Path], hint: Optional[str] = None):
        self.path = Path(path)
        msg = f"Artefacto em falta: {self.path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)


class DataInvariantError(SessRecError):
    exit_code = 3


class ParseError(DataInvariantError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"linha {line}: {message}"
        super().__init__(message)


class DuplicateKeyError(DataInvariantError):
    pass


class EmptyTextError(DataInvariantError):
    pass
