"""Scenario runner, QNA behavior, service protocol hygiene, and the
settlement journal under restart."""

from __future__ import annotations

from pathlib import Path

import pytest

from bandx.cli import main as cli_main
from bandx.envelope import Envelope, decode
from bandx.market import NoPath
from bandx.offers import derive_offer_fields
from bandx.payments import open_microcheck
from bandx.qna import PartialEstablishment
from bandx.scenario import (
    AssertionFailed,
    ScenarioParseError,
    build_services,
    parse_scenario,
    run_parsed,
    run_scenario,
)
from bandx.services import Bus

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

MINI_TOPO = """\
ne ispA A-Rome Rome
ne ispA A-Paris Paris
ne ispB B-Paris Paris
ne ispB B-Dublin Dublin
link A-Rome A-Paris Rome-Paris 100
link B-Paris B-Dublin Paris-Dublin 100
"""


def _scn(tmp_path: Path, body: str) -> Path:
    (tmp_path / "mini.topo").write_text(MINI_TOPO)
    path = tmp_path / "case.scn"
    path.write_text(
        "seed 5\nclock 20031119T080000\ntopology mini.topo\n"
        "guarantor bank\nisp ispA\nisp ispB\n" + body
    )
    return path


def _transcript_envelopes(transcript: bytes) -> list[Envelope]:
    out = []
    rest = transcript
    while rest:
        env, rest = decode(rest)
        out.append(env)
    return out


# ---------------------------------------------------------------------------
# Determinism and golden transcript
# ---------------------------------------------------------------------------

def test_same_seed_same_bytes():
    a = run_scenario(SCENARIOS / "rome-dublin.scn")
    b = run_scenario(SCENARIOS / "rome-dublin.scn")
    assert a.transcript == b.transcript
    assert a.report == b.report


def test_rome_dublin_matches_golden_transcript():
    result = run_scenario(SCENARIOS / "rome-dublin.scn")
    golden = (SCENARIOS / "rome-dublin.golden.transcript").read_bytes()
    assert result.transcript == golden
    assert result.report == (SCENARIOS / "rome-dublin.golden.report").read_text()


def test_seed_change_changes_transcript(tmp_path):
    original = (SCENARIOS / "rome-dublin.scn").read_text()
    (tmp_path / "rome-dublin.topo").write_text(
        (SCENARIOS / "rome-dublin.topo").read_text()
    )
    reseeded = tmp_path / "reseeded.scn"
    reseeded.write_text(original.replace("seed 1302", "seed 1303"))
    a = run_scenario(SCENARIOS / "rome-dublin.scn")
    b = run_scenario(reseeded)
    assert a.transcript != b.transcript


def test_empty_scenario_has_zero_balances(tmp_path):
    path = _scn(tmp_path, "")
    result = run_scenario(path)
    assert "balances:\nreservations:" in result.report  # no balance rows at all
    kinds = {e.msg_type for e in _transcript_envelopes(result.transcript)}
    assert "RESERVE-SPOT" not in kinds and "DEPOSIT" not in kinds


# ---------------------------------------------------------------------------
# Event failures and exit codes
# ---------------------------------------------------------------------------

def test_failed_assert_carries_event_index(tmp_path):
    path = _scn(
        tmp_path,
        "post-offer ispA Rome Paris 50 3.00 USD 20031125\n"
        "assert offers 7\n",
    )
    with pytest.raises(AssertionFailed) as err:
        run_scenario(path)
    assert err.value.event_index == 1


def test_cli_exit_codes(tmp_path, capsys):
    ok = _scn(tmp_path, "post-offer ispA Rome Paris 50 3.00 USD 20031125\n")
    assert cli_main(["run", str(ok)]) == 0
    bad_assert = tmp_path / "bad.scn"
    bad_assert.write_text(ok.read_text() + "assert offers 9\n")
    assert cli_main(["run", str(bad_assert)]) == 2
    unparseable = tmp_path / "broken.scn"
    unparseable.write_text("seed x\n")
    assert cli_main(["run", str(unparseable)]) == 3
    capsys.readouterr()


def test_expected_error_option(tmp_path):
    path = _scn(tmp_path, "buy-spot alice Rome Dublin 50 expect=no-path\n")
    # alice is not declared; add her.
    path.write_text(path.read_text().replace(
        "isp ispB\n", "isp ispB\ncustomer alice bank 10.00 USD 20041231\n"
    ))
    run_scenario(path)  # the expected no-path makes the event pass


# ---------------------------------------------------------------------------
# QNA behavior
# ---------------------------------------------------------------------------

def test_no_offers_means_no_path_and_no_ne_traffic(tmp_path):
    path = _scn(tmp_path, "customer alice bank 10.00 USD 20041231\n")
    scn = parse_scenario(path.read_text(), tmp_path)
    bus = Bus(build_services(scn))
    from bandx.scenario import _Runner

    runner = _Runner(scn, bus)
    runner.setup()
    with pytest.raises(NoPath):
        runner.sessions["alice"].purchase_spot("Rome", "Dublin", 50, runner.clock)
    kinds = [e.msg_type for e in _transcript_envelopes(b"".join(bus.transcript))]
    assert "CHALLENGE-REQ" not in kinds and "RESERVE-SPOT" not in kinds


def test_partial_establishment_restores_first_leg(tmp_path):
    # Provider B's leg costs more than the guarantor allows per check, so
    # B refuses payment after A has already established.
    path = _scn(
        tmp_path,
        "customer alice bank 4.00 USD 20041231\n"
        "post-offer ispA Rome Paris 50 3.00 USD 20031125\n"
        "post-offer ispB Paris Dublin 50 5.00 USD 20031125\n",
    )
    scn = parse_scenario(path.read_text(), tmp_path)
    bus = Bus(build_services(scn))
    from bandx.scenario import _Runner

    runner = _Runner(scn, bus)
    runner.setup()
    runner.run_events()
    fabric = bus.services["isp"].fabric
    before = fabric.ne("A-Rome").free_capacity("A-Paris")
    with pytest.raises(PartialEstablishment) as err:
        runner.sessions["alice"].purchase_spot("Rome", "Dublin", 50, runner.clock)
    assert len(err.value.released) == 1
    assert fabric.ne("A-Rome").free_capacity("A-Paris") == before
    assert fabric.ne("B-Paris").free_capacity("B-Dublin") == 100


def test_qna_pays_exactly_the_prorated_price():
    # Scan every purchase envelope in the bundled scenarios: the check for
    # offer i is exactly the pro-rated price for the purchased bandwidth.
    for name in ("rome-dublin.scn", "presentation-futures.scn", "unbundle.scn"):
        result = run_scenario(SCENARIOS / name)
        for env in _transcript_envelopes(result.transcript):
            if env.msg_type not in ("RESERVE-SPOT", "BOOK-FUTURE"):
                continue
            from bandx.credentials import parse_credential

            offers = [
                derive_offer_fields(parse_credential(b.decode()))
                for b in env.numbered_blocks("offer")
            ]
            checks = [
                open_microcheck(parse_credential(b.decode()))
                for b in env.numbered_blocks("check")
            ]
            bandwidth = int(env.require("bandwidth"))
            for offer, check in zip(offers, checks):
                assert check.amount == offer.prorated_price(bandwidth)


def test_partial_future_booking_releases_committed_calendar(tmp_path):
    path = _scn(
        tmp_path,
        "customer alice bank 4.00 USD 20041231\n"
        "post-offer ispA Rome Paris 50 3.00 USD 20031125\n"
        "post-offer ispB Paris Dublin 50 5.00 USD 20031125\n",
    )
    scn = parse_scenario(path.read_text(), tmp_path)
    bus = Bus(build_services(scn))
    from bandx.scenario import _Runner

    runner = _Runner(scn, bus)
    runner.setup()
    runner.run_events()
    fabric = bus.services["isp"].fabric
    with pytest.raises(PartialEstablishment):
        runner.sessions["alice"].purchase_future(
            "Rome", "Dublin", 50,
            (runner.clock + 86400, runner.clock + 90000), runner.clock,
        )
    ne = fabric.ne("A-Rome")
    assert ne.calendar["A-Paris"] == {}  # provider A's commitment rolled back
    from bandx.fabric import capacity_violations

    assert capacity_violations(fabric) == []


def test_dispute_endpoint_replays_recorded_verdict(tmp_path):
    from bandx.settlement import encode_record

    path = _scn(
        tmp_path,
        "customer alice bank 50.00 USD 20041231\n"
        "post-offer ispA Rome Paris 50 3.00 USD 20031125\n"
        "buy-spot alice Rome Paris 50\n"
        "deposit all\n",
    )
    scn = parse_scenario(path.read_text(), tmp_path)
    bus = Bus(build_services(scn))
    from bandx.scenario import _Runner

    runner = _Runner(scn, bus)
    runner.setup()
    runner.run_events()
    entry = next(iter(bus.services["csc"].csc.entries()))
    reply = bus.send("csc", "DISPUTE", {}, {"record": encode_record(entry.record)})
    assert reply.msg_type == "DISPUTE-RESP"
    assert reply.get("verdict") == "true"
    assert reply.get("recorded") == "true"


def test_tampered_booking_credential_fails_activation_end_to_end(tmp_path):
    from bandx.credentials import BadSignature, parse_credential, render_credential

    path = _scn(
        tmp_path,
        "customer alice bank 50.00 USD 20041231\n"
        "post-offer ispA Rome Paris 50 3.00 USD 20031125\n"
        "post-offer ispB Paris Dublin 50 3.00 USD 20031125\n",
    )
    scn = parse_scenario(path.read_text(), tmp_path)
    bus = Bus(build_services(scn))
    from bandx.scenario import _Runner

    runner = _Runner(scn, bus)
    runner.setup()
    runner.run_events()
    session = runner.sessions["alice"]
    creds = session.purchase_future(
        "Rome", "Dublin", 50, (runner.clock + 86400, runner.clock + 90000),
        runner.clock,
    )
    assert len(creds) == 2
    bus.broadcast_clock(runner.clock + 86400)  # reach the booked interval
    tampered = parse_credential(render_credential(creds[0]).replace("== 50", "== 99"))
    with pytest.raises(BadSignature):
        session.activate([tampered, creds[1]], runner.clock + 86400)
    # Fail-fast: the second provider was never touched.
    fabric = bus.services["isp"].fabric
    states = {r.state for r in fabric.reservations.values()}
    assert states == {"notional"}
    # The genuine credentials still activate.
    handle = session.activate(creds, runner.clock + 86400)
    assert all(leg.state == "active" for leg in handle.legs)


# ---------------------------------------------------------------------------
# Service protocol hygiene
# ---------------------------------------------------------------------------

def test_unknown_message_type_is_protocol_error(tmp_path):
    path = _scn(tmp_path, "")
    scn = parse_scenario(path.read_text(), tmp_path)
    bus = Bus(build_services(scn))
    reply = bus.send("ch", "NO-SUCH-VERB")
    assert reply.msg_type == "ERROR"
    assert reply.get("code") == "protocol"


def test_malformed_envelope_gets_error_reply(tmp_path):
    path = _scn(tmp_path, "")
    scn = parse_scenario(path.read_text(), tmp_path)
    services = build_services(scn)
    reply_bytes = services["ch"].handle_bytes(b"garbage that is not an envelope\n")
    reply, _ = decode(reply_bytes)
    assert reply.msg_type == "ERROR" and reply.get("code") == "protocol"


# ---------------------------------------------------------------------------
# Settlement journal across service restarts
# ---------------------------------------------------------------------------

def test_csc_restart_keeps_double_deposit_and_conservation(tmp_path):
    journal = tmp_path / "csc.journal"
    path = _scn(
        tmp_path,
        "customer alice bank 50.00 USD 20041231\n"
        "post-offer ispA Rome Paris 50 3.00 USD 20031125\n"
        "buy-spot alice Rome Paris 50\n"
        "deposit all\n",
    )
    scn = parse_scenario(path.read_text(), tmp_path)
    bus = Bus(build_services(scn, journal_path=str(journal)))
    from bandx.scenario import _Runner

    runner = _Runner(scn, bus)
    runner.setup()
    runner.run_events()
    old_csc = bus.services["csc"].csc
    records = [e.record for e in old_csc.entries()]
    balances = old_csc.balances()
    assert records and balances

    # A new process over the same journal: state is rebuilt, a replayed
    # batch is rejected, conservation still holds.
    from bandx.settlement import SettlementCenter

    reborn = SettlementCenter(
        old_csc._guarantors, journal_path=journal
    )
    assert reborn.balances() == balances
    report = reborn.deposit_batch(records)
    assert report.accepted == ()
    assert all(reason == "double-deposit" for _, reason in report.rejected)
    totals: dict[str, int] = {}
    for (key, cur), cents in reborn.balances().items():
        totals[cur] = totals.get(cur, 0) + cents
    assert all(v == 0 for v in totals.values())
