//! Layering rules checked against the source tree.

use std::path::Path;

fn source(rel: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)).unwrap()
}

#[test]
fn http_layer_only_talks_to_the_service() {
    let http = source("src/gateway/http.rs");
    for forbidden in [
        "crate::store",
        "crate::fleet",
        "crate::allocator",
        "crate::sentinel",
        "Store",
        "Fleet",
    ] {
        assert!(
            !http.contains(forbidden),
            "gateway/http.rs mentions {forbidden}"
        );
    }
}

#[test]
fn service_layer_knows_nothing_about_http() {
    let service = source("src/gateway/service.rs");
    for forbidden in ["axum", "StatusCode", "HeaderMap"] {
        assert!(
            !service.contains(forbidden),
            "gateway/service.rs mentions {forbidden}"
        );
    }
}

#[test]
fn domain_is_pure() {
    for file in [
        "application.rs",
        "audit.rs",
        "ids.rs",
        "mod.rs",
        "time.rs",
        "types.rs",
    ] {
        let text = source(&format!("src/domain/{file}"));
        for forbidden in [
            "crate::store",
            "crate::fleet",
            "crate::gateway",
            "crate::sentinel",
            "std::fs",
            "std::net",
        ] {
            assert!(
                !text.contains(forbidden),
                "domain/{file} mentions {forbidden}"
            );
        }
    }
}
