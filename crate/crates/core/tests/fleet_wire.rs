use std::sync::Arc;

use pubcluster_core::allocator::Inventory;
use pubcluster_core::fleet::wire::{FleetServer, RemoteFleet};
use pubcluster_core::fleet::{Fleet, FleetError, Manifest};
use pubcluster_core::{NodeId, PowerState, SystemClock};

fn serve(nodes: usize) -> std::net::SocketAddr {
    let fleet = Arc::new(Fleet::new(
        &Inventory::demo(nodes),
        Manifest::default(),
        "gw",
        Arc::new(SystemClock),
    ));
    let server = FleetServer::bind(fleet, "127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap();
    server.spawn();
    addr
}

#[test]
fn remote_exec_transfer_power_and_sensors() {
    let addr = serve(2);
    let gw = RemoteFleet::connect(addr, "gw").unwrap();
    let n: NodeId = "n00".into();

    assert!(matches!(
        gw.exec(&n, "echo hi"),
        Err(FleetError::NodeUnreachable(_))
    ));
    let view = gw.power(&n, PowerState::On).unwrap();
    assert_eq!(view.power, PowerState::On);

    let r = gw.exec(&n, "echo hi").unwrap();
    assert_eq!((r.exit_code, r.stdout.as_str()), (0, "hi\n"));
    assert_eq!(gw.exec(&n, "nosuch").unwrap().exit_code, 127);

    let blob: Vec<u8> = (0..=255u8).cycle().take(4096).collect();
    gw.put(&n, "data.bin", &blob).unwrap();
    assert_eq!(gw.get(&n, "data.bin").unwrap(), blob);
    assert!(matches!(
        gw.get(&n, "missing"),
        Err(FleetError::NoSuchFile { .. })
    ));

    let s = gw.sensors(&n).unwrap();
    assert_eq!((s.temperature_c, s.load), (25.0, 0.0));
    assert!(matches!(
        gw.exec(&"n99".into(), "true"),
        Err(FleetError::UnknownNode(_))
    ));
}

#[test]
fn remote_foreign_identity_is_refused() {
    let addr = serve(1);
    let gw = RemoteFleet::connect(addr, "gw").unwrap();
    let n: NodeId = "n00".into();
    gw.power(&n, PowerState::On).unwrap();
    let mallory = RemoteFleet::connect(addr, "mallory").unwrap();
    assert!(matches!(
        mallory.exec(&n, "echo hi"),
        Err(FleetError::IdentityRejected(_))
    ));
    assert!(matches!(
        mallory.sensors(&n),
        Err(FleetError::IdentityRejected(_))
    ));
    assert!(matches!(
        mallory.power(&n, PowerState::Off),
        Err(FleetError::IdentityRejected(_))
    ));
}

#[test]
fn malformed_lines_get_an_error_response() {
    use std::io::{BufRead, BufReader, Write};
    let addr = serve(1);
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    s.write_all(b"{not json\n").unwrap();
    let mut line = String::new();
    BufReader::new(s.try_clone().unwrap())
        .read_line(&mut line)
        .unwrap();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["exit_code"], 255);
    assert_eq!(v["error"], "BadRequest");
}
