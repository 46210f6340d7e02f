use crate::types::HopObservation;

use super::{traceroute, traceroute_to_gra, GraOutcome, ProbeConfig, ProbeError, RawRunRecord, RevelioNetwork};

fn note(errors: &mut Vec<String>, msg: String) {
    if !errors.contains(&msg) {
        log::debug!("{msg}");
        errors.push(msg);
    }
}

/// Sized traceroutes toward `target`: every size once per repetition round.
fn sized_sweep<N: RevelioNetwork + ?Sized>(
    net: &mut N,
    target: std::net::Ipv4Addr,
    cfg: &ProbeConfig,
    label: &str,
    errors: &mut Vec<String>,
) -> Vec<HopObservation> {
    let mut out = Vec::new();
    for _ in 0..cfg.repetitions_per_size {
        for &size in &cfg.packet_sizes {
            match traceroute(net, target, size, cfg) {
                Ok(hops) => out.extend(hops),
                // nothing has ever answered and the path is dead: stop rather
                // than wait out every remaining probe
                Err(e @ (ProbeError::AllHopsSilent | ProbeError::SendFailure(_))) if out.is_empty() => {
                    note(errors, format!("{label} sweep abandoned at {size} bytes: {e}"));
                    return out;
                }
                Err(e) => note(errors, format!("{label} traceroute at {size} bytes: {e}")),
            }
        }
    }
    out
}

/// One complete Revelio run. Only an invalid configuration is an error;
/// network failures are written into the record and the run continues.
pub fn run_revelio_session<N: RevelioNetwork + ?Sized>(
    net: &mut N,
    device_id: &str,
    cfg: &ProbeConfig,
) -> Result<RawRunRecord, ProbeError> {
    cfg.validate()?;
    let timestamp = net.now();
    let mut errors = Vec::new();

    let gra_observation = match net.discover_gra(cfg) {
        Ok(obs) => GraOutcome::Observed(obs),
        Err(e) => {
            note(&mut errors, format!("STUN: {e}"));
            GraOutcome::Failed { reason: e.to_string() }
        }
    };
    // an identity mapping puts the GRA on this host; there is no path to trace
    let gra = gra_observation.observation().filter(|o| !o.is_identity_mapping()).map(|o| o.gra);

    let gra_traceroute = match gra {
        Some(gra) => match traceroute_to_gra(net, gra, cfg) {
            Ok((hops, _)) => hops,
            Err(e) => {
                note(&mut errors, format!("GRA traceroute: {e}"));
                Vec::new()
            }
        },
        None => Vec::new(),
    };

    let sized_traceroutes = sized_sweep(net, cfg.external_target, cfg, "external", &mut errors);
    let gra_sized_traceroutes = match gra {
        Some(gra) => sized_sweep(net, gra, cfg, "GRA", &mut errors),
        None => Vec::new(),
    };

    let cpe_adjacent = gra_traceroute
        .iter()
        .chain(&sized_traceroutes)
        .any(|h| h.ttl == 1 && h.reply.is_some());
    let upnp_wan_ip = if cpe_adjacent {
        net.query_upnp()
    } else {
        note(&mut errors, "UPnP skipped: no responder at hop 1".into());
        None
    };

    Ok(RawRunRecord {
        device_id: device_id.to_owned(),
        timestamp,
        gra_observation,
        gra_traceroute,
        sized_traceroutes,
        gra_sized_traceroutes,
        upnp_wan_ip,
        errors,
    })
}
