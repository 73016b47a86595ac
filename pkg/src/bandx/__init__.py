"""Bandwidth exchange: credential-based offers, microcheck clearing,
spot and futures reservations across simulated providers."""

from .credentials import (
    ActionAttributeSet,
    Credential,
    check_compliance,
    eval_conditions,
    parse_credential,
    render_credential,
    sign_credential,
    verify_signature,
)
from .keys import KeyPair, PublicKeyId, generate_keypair
from .market import ClearingHouse, OfferQuery, PathPlan
from .money import Money
from .offers import Offer, make_offer_credential, validate_unbundling
from .payments import Wallet, issue_guarantor_credential, verify_payment
from .settlement import SettlementCenter, TransactionRecord

__all__ = [
    "ActionAttributeSet",
    "ClearingHouse",
    "Credential",
    "KeyPair",
    "Money",
    "Offer",
    "OfferQuery",
    "PathPlan",
    "PublicKeyId",
    "SettlementCenter",
    "TransactionRecord",
    "Wallet",
    "check_compliance",
    "eval_conditions",
    "generate_keypair",
    "issue_guarantor_credential",
    "make_offer_credential",
    "parse_credential",
    "render_credential",
    "sign_credential",
    "validate_unbundling",
    "verify_payment",
]

__version__ = "0.1.0"
