# errors.py
# Every failure the simulator and the protocol can report. Argument errors
# also derive from ValueError so generic callers can still catch them.


class QVoteError(Exception):
    """Root of all qvote errors."""


# --- qsim ---

class InvalidBasisIndex(QVoteError, ValueError):
    pass


class InvalidTarget(QVoteError, ValueError):
    pass


class DimensionMismatch(QVoteError, ValueError):
    pass


class RegisterTooLarge(QVoteError, ValueError):
    """More qubits than a dense desk-scale simulation can hold."""


# --- encoding ---

class EmptyBallot(QVoteError, ValueError):
    pass


class ConfigMismatch(QVoteError, ValueError):
    pass


class NoBallots(QVoteError, ValueError):
    pass


# --- protocol-crypto ---

class InvalidLength(QVoteError, ValueError):
    pass


class KeyTooShort(QVoteError, ValueError):
    pass


class InvalidId(QVoteError, ValueError):
    pass


# --- ledger ---

class DuplicateVoter(QVoteError):
    pass


# --- grover ---

class AmbiguousTarget(QVoteError, ValueError):
    pass


class SearchSpaceTooLarge(QVoteError, ValueError):
    pass


# --- protocol ---

class NotEligible(QVoteError):
    pass


class AlreadyRegistered(QVoteError):
    pass


class ProtocolOrderViolation(QVoteError):
    """A party was asked to act out of its phase order."""


class TallyBlocked(ProtocolOrderViolation):
    """A held ballot cannot be tallied because its voter never released the
    entanglement details."""


class UnknownVoter(QVoteError):
    pass


class ChannelError(QVoteError):
    """A quantum message was read after it had been delivered."""


# --- election / replay ---

class ReplayDivergence(QVoteError):
    def __init__(self, where: str, detail: str):
        super().__init__(f"divergence at {where}: {detail}")
        self.where = where
        self.detail = detail
