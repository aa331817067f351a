mod common;

use common::*;
use gridloss::distflow::DgConfig;
use gridloss::grid;
use gridloss::load::ZipCoefficients;
use proptest::prelude::*;

fn ok(check: Check) -> Result<(), TestCaseError> {
    check.map_err(TestCaseError::fail)
}

#[test]
fn bundled_feeders_hold_grid_invariants() {
    for net in [grid::ieee15().unwrap(), grid::ieee33().unwrap()] {
        check_round_trip(&net).unwrap();
        check_per_unit(&net).unwrap();
        check_tree(&net).unwrap();
        let pu = net.to_per_unit().unwrap();
        check_voltage_drop_identity(&pu).unwrap();
        check_voltage_ordering(&pu, &ZipCoefficients::default()).unwrap();
        check_energy_balance(&pu, &ZipCoefficients::default(), &[]).unwrap();
        check_sweep_matches_oracle(&pu, &ZipCoefficients::default(), &[]).unwrap();
    }
}

#[test]
fn zp_bound_holds_at_the_corners() {
    for (z, i, p) in [
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (0.0, 0.0, 1.0),
        (0.4, 0.3, 0.3),
    ] {
        check_zp_bound(&ZipCoefficients::uniform(z, i, p)).unwrap();
    }
}

#[test]
fn bnb_matches_enumeration_on_small_bundled_cases() {
    let net = grid::ieee15().unwrap().to_per_unit().unwrap();
    let zip = ZipCoefficients::uniform(0.1, 0.3, 0.6);
    check_bnb_matches_enumeration(&net, &zip, &DgConfig::from_kva(&net, 1, 2100.0)).unwrap();
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn feeders_round_trip_and_stay_trees(net in arb_feeder(12)) {
        ok(check_round_trip(&net))?;
        ok(check_per_unit(&net))?;
        ok(check_tree(&net))?;
    }

    #[test]
    fn zp_error_is_bounded(zip in arb_zip()) {
        ok(check_zp_bound(&zip))?;
    }

    #[test]
    fn zp_is_affine(zip in arb_zip(), p0 in -500.0..500.0f64) {
        ok(check_affinity(&zip, p0))?;
    }

    #[test]
    fn sweep_balances_energy(
        net in arb_feeder(12),
        zip in arb_zip(),
        dgs in prop::collection::vec((0.0..0.3f64, -0.1..0.1f64), 0..3),
    ) {
        ok(check_sweep_case(&net, &zip, &dgs))?;
    }
}

proptest! {
    #![proptest_config(config(96))]

    #[test]
    fn two_stage_solutions_are_feasible_and_ordered(
        net in arb_feeder(8),
        zip in arb_zip(),
        n_dg in 1usize..=2,
        s_kva in 200.0..1500.0f64,
    ) {
        let pu = net.to_per_unit().unwrap();
        prop_assume!(pu.buses().len() > n_dg);
        let dg = DgConfig::from_kva(&pu, n_dg, s_kva);
        check_two_stage(&pu, &zip, &dg).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn bnb_matches_enumeration(
        net in arb_feeder(8),
        zip in arb_zip(),
        n_dg in 1usize..=3,
        s_kva in 200.0..1500.0f64,
    ) {
        let pu = net.to_per_unit().unwrap();
        prop_assume!(pu.buses().len() > n_dg);
        let dg = DgConfig::from_kva(&pu, n_dg, s_kva);
        check_bnb_matches_enumeration(&pu, &zip, &dg).map_err(TestCaseError::fail)?;
    }
}
