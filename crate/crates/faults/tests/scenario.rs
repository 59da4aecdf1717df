use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use tfc_core::protocol::{Cluster, ClusterSpec};
use tfc_faults::{fault_install, parse_scenario, FaultError, FaultKind, FaultSpec, Records, Trigger};

#[test]
fn scenario_sections_parse() {
    let text = "# matrix entry\n[fault]\nkind = F3\ntarget = 2\nblock = 10\nitem = 17\n\n[fault]\nkind = split-two-ch\ntarget = 0\nclient = 4294967295\ngroup = 3, 4\n";
    let specs = parse_scenario(text).unwrap();
    assert_eq!(specs.len(), 2);
    assert_eq!(specs[0].kind, FaultKind::DataCorruption);
    assert_eq!((specs[0].target, specs[0].item), (2, Some(17)));
    assert_eq!(specs[0].trigger, Trigger::FromBlock(10));
    assert_eq!(specs[1].kind, FaultKind::SplitChallengeTwoCh);
    assert_eq!(specs[1].trigger, Trigger::ClientId(u32::MAX));
    assert_eq!(specs[1].group, Some([3, 4].into()));
}

#[test]
fn scenario_errors_name_the_line() {
    assert!(matches!(parse_scenario("kind = F1"), Err(FaultError::Parse { line: 1, .. })));
    assert!(matches!(parse_scenario("[fault]\ntarget = 1\n"), Err(FaultError::Parse { line: 1, .. })));
    assert!(matches!(parse_scenario("[fault]\nkind = F9\n"), Err(FaultError::Parse { line: 2, .. })));
    assert!(matches!(parse_scenario("[fault]\nkind = F1\nspeed = 3\n"), Err(FaultError::Parse { line: 3, .. })));
    assert!(matches!(parse_scenario("[faults]\n"), Err(FaultError::Parse { line: 1, .. })));
}

#[test]
fn every_kind_code_roundtrips() {
    for k in FaultKind::ALL {
        assert_eq!(k.code().parse::<FaultKind>().unwrap(), k);
    }
}

#[test]
fn coordinator_faults_need_the_coordinator() {
    let data: BTreeMap<u64, i64> = (0..30).map(|i| (i, 0)).collect();
    let mut c = Cluster::build(&ClusterSpec::default(), &data).unwrap();
    let records: Records = Arc::new(Mutex::new(Vec::new()));
    let bad = FaultSpec::new(FaultKind::ForgedRoot, 1, 3);
    assert_eq!(
        fault_install(&mut c.servers, &[bad], &records),
        Err(FaultError::NeedsCoordinator { kind: FaultKind::ForgedRoot, target: 1 })
    );
    let far = FaultSpec::new(FaultKind::BadResponse, 7, 3);
    assert_eq!(fault_install(&mut c.servers, &[far], &records), Err(FaultError::UnknownServer(7)));
    fault_install(&mut c.servers, &[FaultSpec::new(FaultKind::BadResponse, 1, 3)], &records).unwrap();
}
