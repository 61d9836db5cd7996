//! MATPOWER-style `.m` case text: `mpc.baseMVA`, `mpc.bus`, `mpc.gen` and
//! `mpc.branch` tables. Generator cost tables and any other fields are
//! ignored.

use crate::error::{Error, Result};

use super::{Branch, Bus, BusKind, Generator, NetworkCase};

#[derive(PartialEq)]
enum Section {
    None,
    Bus,
    Gen,
    Branch,
    Skip,
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    Error::CaseSyntax { line, message: message.into() }
}

fn parse_row(line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| syntax(line_no, format!("expected a number, found {tok:?}")))
        })
        .collect()
}

/// Parse MATPOWER case text into a validated network.
///
/// MW/MVAr columns are converted to per-unit on `baseMVA`; `VA` and `SHIFT`
/// columns are degrees in the file. A branch `TAP` of zero means 1.0, and
/// out-of-service generators (STATUS <= 0) are dropped.
pub fn parse_matpower_case(text: &str) -> Result<NetworkCase> {
    let mut base_mva: Option<f64> = None;
    let mut bus_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut gen_rows: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut branch_rows: Vec<(usize, Vec<f64>)> = Vec::new();

    let mut section = Section::None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('%') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }

        if section == Section::None {
            if let Some(rest) = line.strip_prefix("mpc.baseMVA") {
                let value = rest
                    .trim_start()
                    .strip_prefix('=')
                    .map(|v| v.trim().trim_end_matches(';').trim())
                    .ok_or_else(|| syntax(line_no, "malformed mpc.baseMVA assignment"))?;
                base_mva = Some(
                    value
                        .parse::<f64>()
                        .map_err(|_| syntax(line_no, format!("bad baseMVA value {value:?}")))?,
                );
                continue;
            }
            let table = if line.starts_with("mpc.bus_name") {
                Some(Section::Skip)
            } else if line.starts_with("mpc.bus") {
                Some(Section::Bus)
            } else if line.starts_with("mpc.gencost") {
                Some(Section::Skip)
            } else if line.starts_with("mpc.gen") {
                Some(Section::Gen)
            } else if line.starts_with("mpc.branch") {
                Some(Section::Branch)
            } else if line.contains("= [") || line.ends_with('[') {
                Some(Section::Skip)
            } else {
                None // function header, version string, etc.
            };
            if let Some(s) = table {
                if line.contains('[') {
                    section = s;
                }
                continue;
            }
            continue;
        }

        if line.starts_with("];") || line == "]" {
            section = Section::None;
            continue;
        }

        let body = line.trim_end_matches(';').trim();
        if body.is_empty() {
            continue;
        }
        match section {
            Section::Bus => bus_rows.push((line_no, parse_row(line_no, body)?)),
            Section::Gen => gen_rows.push((line_no, parse_row(line_no, body)?)),
            Section::Branch => branch_rows.push((line_no, parse_row(line_no, body)?)),
            Section::Skip => {}
            Section::None => unreachable!(),
        }
    }

    let base = base_mva.ok_or_else(|| syntax(0, "missing mpc.baseMVA"))?;
    if bus_rows.is_empty() {
        return Err(syntax(0, "missing or empty mpc.bus table"));
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut slack_index = None;
    for (line_no, row) in &bus_rows {
        if row.len() < 13 {
            return Err(syntax(*line_no, format!("bus row has {} columns, expected at least 13", row.len())));
        }
        let kind = match row[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => {
                if slack_index.is_some() {
                    return Err(Error::InvalidCase(format!(
                        "multiple slack buses: second one is {} ",
                        row[0] as i64
                    )));
                }
                slack_index = Some(buses.len());
                BusKind::Slack
            }
            other => {
                return Err(syntax(*line_no, format!("unsupported bus type {other} at bus {}", row[0] as i64)));
            }
        };
        buses.push(Bus {
            id: row[0] as i64,
            kind,
            p_demand: row[2] / base,
            q_demand: row[3] / base,
            g_shunt: row[4] / base,
            b_shunt: row[5] / base,
            v_mag_setpoint: row[7],
            v_ang_setpoint: row[8].to_radians(),
        });
    }
    let slack_index = slack_index.ok_or_else(|| Error::InvalidCase("no slack bus".into()))?;

    let positions: std::collections::HashMap<i64, usize> =
        buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let index_of = move |id: i64, line_no: usize| -> Result<usize> {
        positions
            .get(&id)
            .copied()
            .ok_or_else(|| syntax(line_no, format!("reference to unknown bus id {id}")))
    };

    let mut generators = Vec::new();
    for (line_no, row) in &gen_rows {
        if row.len() < 10 {
            return Err(syntax(*line_no, format!("gen row has {} columns, expected at least 10", row.len())));
        }
        if row[7] <= 0.0 {
            continue; // out of service
        }
        let bus = index_of(row[0] as i64, *line_no)?;
        generators.push(Generator {
            bus,
            p_gen: row[1] / base,
            q_gen: row[2] / base,
            v_setpoint: row[5],
        });
        // MATPOWER practice: the generator's voltage target governs its bus.
        if row[5] > 0.0 {
            buses[bus].v_mag_setpoint = row[5];
        }
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (line_no, row) in &branch_rows {
        if row.len() < 11 {
            return Err(syntax(*line_no, format!("branch row has {} columns, expected at least 11", row.len())));
        }
        branches.push(Branch {
            from: index_of(row[0] as i64, *line_no)?,
            to: index_of(row[1] as i64, *line_no)?,
            r: row[2],
            x: row[3],
            b_charge: row[4],
            tap: if row[8] == 0.0 { 1.0 } else { row[8] },
            shift: row[9].to_radians(),
            in_service: row[10] > 0.0,
        });
    }

    let case = NetworkCase {
        base_mva: base,
        buses,
        branches,
        generators,
        slack_index,
    };
    case.validate()?;
    Ok(case)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
function mpc = smalltest
% a comment line
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0     0    0  0  1  1.06  0  132  1  1.1  0.9;
    2  1  21.7  12.7 0  0  1  1.00  0  132  1  1.1  0.9;
    5  2  0     0    0  19 1  1.00  0  132  1  1.1  0.9; % trailing comment
];
mpc.gen = [
    1  232.4  -16.9  100  -100  1.06  100  1  300  0;
    5  40.0   42.4   50   -40   1.045 100  1  100  0;
    2  10.0   0.0    50   -40   1.0   100  0  100  0;
];
mpc.branch = [
    1  2  0.01938  0.05917  0.0528  0 0 0  0      0  1;
    2  5  0.05695  0.17388  0.0346  0 0 0  0.978  2  1;
];
mpc.gencost = [
    2 0 0 3 0.01 40 0;
];
";

    #[test]
    fn parses_tables_and_converts_units() {
        let case = parse_matpower_case(SMALL).unwrap();
        assert_eq!(case.n(), 3);
        assert_eq!(case.l(), 2);
        assert_eq!(case.base_mva, 100.0);
        assert_eq!(case.slack_index, 0);
        assert_eq!(case.buses[1].id, 2);
        assert_eq!(case.buses[1].p_demand, 0.217);
        assert_eq!(case.buses[2].b_shunt, 0.19);
        // Out-of-service generator dropped; VG overrides the bus setpoint.
        assert_eq!(case.generators.len(), 2);
        assert_eq!(case.buses[2].v_mag_setpoint, 1.045);
        // Tap default and explicit value; shift converted to radians.
        assert_eq!(case.branches[0].tap, 1.0);
        assert_eq!(case.branches[1].tap, 0.978);
        assert!((case.branches[1].shift - 2f64.to_radians()).abs() < 1e-15);
        // External id 5 mapped positionally.
        assert_eq!(case.branches[1].to, 2);
    }

    #[test]
    fn reports_line_numbers_for_bad_tokens() {
        let broken = SMALL.replace("0.05917", "abc");
        let err = parse_matpower_case(&broken).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 16") && msg.contains("abc"), "{msg}");
    }

    #[test]
    fn rejects_unknown_branch_endpoint() {
        let broken = SMALL.replace("2  5  0.05695", "2  9  0.05695");
        let err = parse_matpower_case(&broken).unwrap_err();
        assert!(err.to_string().contains("unknown bus id 9"), "{err}");
    }

    #[test]
    fn rejects_isolated_bus_type() {
        let broken = SMALL.replace("2  1  21.7", "2  4  21.7");
        let err = parse_matpower_case(&broken).unwrap_err();
        assert!(err.to_string().contains("unsupported bus type 4"), "{err}");
    }
}
