"""Shared fixtures: the locally re-signed conformance chain.

The chain has four credentials: a check-guarantor credential (limit
$5.00, expiry 20040324), an open-access Dublin-NYC 50Mbps offer at min
$3.00, a $4.25 microcheck with nonce eb2c3dfc8e9a, and a local policy
licensing the guarantor and merchant keys jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import pytest

from bandx.credentials import ActionAttributeSet, Credential, build_credential, sign_credential
from bandx.keys import POLICY, KeyPair, generate_keypair

CHAIN_DATE = "20031119"
CG_EXPIRY = "20040324"
OFFER_EXPIRY = "20031120"
CHAIN_NONCE = "eb2c3dfc8e9a"


@dataclass(frozen=True)
class ConformanceChain:
    alice: KeyPair
    guarantor: KeyPair
    merchant: KeyPair
    cwc: Credential
    offer: Credential
    check: Credential
    policy: Credential
    action: ActionAttributeSet


def make_chain(
    amount: str = "4.25",
    currency: str = "USD",
    nonce: str = CHAIN_NONCE,
    date: str = CHAIN_DATE,
    cg_expiry: str = CG_EXPIRY,
) -> ConformanceChain:
    alice = generate_keypair("fixture:alice")
    guarantor = generate_keypair("fixture:guarantor")
    merchant = generate_keypair("fixture:merchant")

    cwc = sign_credential(
        build_credential(
            guarantor.public_id,
            f'"{alice.public_id}"',
            'app_domain == "BAND-X" && currency == "USD" && &amount < 5.01 '
            f'&& date < "{cg_expiry}" -> "true";',
        ),
        guarantor,
    )
    offer = sign_credential(
        build_credential(
            merchant.public_id,
            "",
            'app_domain == "BAND-X" && currency == "USD" && &bandwidth <= "50Mbps" '
            '&& link_name == "Dublin-NYC" && &amount >= 3.00 '
            f'&& date < "{OFFER_EXPIRY}" -> "true";',
        ),
        merchant,
    )
    check = sign_credential(
        build_credential(
            alice.public_id,
            f'"{merchant.public_id}"',
            f'app_domain == "BAND-X" && currency == "{currency}" && amount == "{amount}" '
            f'&& nonce == "{nonce}" && date == "{date}" -> "true";',
        ),
        alice,
    )
    policy = build_credential(
        POLICY,
        f'"{guarantor.public_id}" && "{merchant.public_id}"',
        'app_domain == "BAND-X" -> "true";',
    )
    action = ActionAttributeSet.of(
        app_domain="BAND-X",
        currency=currency,
        amount=amount,
        nonce=nonce,
        date=date,
        bandwidth="50",
        link_name="Dublin-NYC",
    )
    return ConformanceChain(alice, guarantor, merchant, cwc, offer, check, policy, action)


@pytest.fixture(scope="session")
def chain() -> ConformanceChain:
    return make_chain()
