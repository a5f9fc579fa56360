//! Report figures as self-contained SVG. Plots are built with plain string
//! writes so identical reports produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::eval::{EvalReport, EvalRow};

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 60.0; // left margin, y labels
const MR: f64 = 170.0; // right margin, legend
const MT: f64 = 20.0;
const MB: f64 = 46.0;

const PALETTE: [&str; 6] = [
    "#1b6ca8", "#d1495b", "#3a7d44", "#8d6a9f", "#c77d2f", "#4a4a4a",
];

/// Success rate against attack budget, one line per
/// (attack, pool size, training budget) group, averaged over master seeds.
/// Rows with an undefined rate are skipped.
pub fn asr_vs_epsilon_svg(report: &EvalReport) -> Result<String> {
    // (attack, eot, m, epsilon_train bits) -> epsilon_attack bits -> rates
    type LineGroups = BTreeMap<(String, usize, usize, u64), BTreeMap<u64, Vec<f64>>>;
    let mut groups: LineGroups = BTreeMap::new();
    for r in defined_rows(report)? {
        groups
            .entry((
                r.attack.as_str().to_string(),
                r.eot_samples,
                r.m,
                r.epsilon_train.to_bits(),
            ))
            .or_default()
            .entry(r.epsilon_attack.to_bits())
            .or_default()
            .push(r.asr.expect("filtered to defined"));
    }

    let eps_max = groups
        .values()
        .flat_map(|line| line.keys())
        .map(|&b| f64::from_bits(b))
        .fold(0.0f64, f64::max)
        .max(1e-9);

    let mut svg = open_svg();
    axes(&mut svg, "attack budget", "attack success rate");
    for t in 0..=4 {
        let frac = t as f64 / 4.0;
        xtick(&mut svg, frac, &format!("{:.2}", frac * eps_max));
        ytick(&mut svg, frac, &format!("{frac:.2}"));
    }
    for (gi, ((attack, eot, m, eps_train), line)) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let mut points = String::new();
        for (&eps_bits, rates) in line {
            let x = f64::from_bits(eps_bits) / eps_max;
            let y = rates.iter().sum::<f64>() / rates.len() as f64;
            let _ = write!(points, "{:.2},{:.2} ", px(x), py(y));
        }
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.trim_end()
        );
        let label = if *eot > 1 {
            format!("{attack} eot={eot} m={m} train={}", f64::from_bits(*eps_train))
        } else {
            format!("{attack} m={m} train={}", f64::from_bits(*eps_train))
        };
        legend_entry(&mut svg, gi, color, &label);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Robustness against clean accuracy, one marker per
/// (attack, pool size, training budget) group, averaged over master seeds.
pub fn tradeoff_svg(report: &EvalReport) -> Result<String> {
    // (attack, eot, m, epsilon_train, epsilon_attack) -> (accuracies, rates)
    type ScatterGroups = BTreeMap<(String, usize, usize, u64, u64), (Vec<f64>, Vec<f64>)>;
    let mut groups: ScatterGroups = BTreeMap::new();
    for r in defined_rows(report)? {
        let e = groups
            .entry((
                r.attack.as_str().to_string(),
                r.eot_samples,
                r.m,
                r.epsilon_train.to_bits(),
                r.epsilon_attack.to_bits(),
            ))
            .or_default();
        e.0.push(r.clean_accuracy);
        e.1.push(r.asr.expect("filtered to defined"));
    }

    let mut svg = open_svg();
    axes(&mut svg, "clean accuracy", "attack success rate");
    for t in 0..=4 {
        let frac = t as f64 / 4.0;
        xtick(&mut svg, frac, &format!("{frac:.2}"));
        ytick(&mut svg, frac, &format!("{frac:.2}"));
    }
    for (gi, ((attack, eot, m, eps_train, eps_attack), (cleans, rates))) in
        groups.iter().enumerate()
    {
        let color = PALETTE[gi % PALETTE.len()];
        let cx = px(cleans.iter().sum::<f64>() / cleans.len() as f64);
        let cy = py(rates.iter().sum::<f64>() / rates.len() as f64);
        let _ = writeln!(
            svg,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4\" fill=\"{color}\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">m={m}</text>",
            cx + 6.0,
            cy + 3.0,
        );
        let label = if *eot > 1 {
            format!(
                "{attack} eot={eot} train={} atk={}",
                f64::from_bits(*eps_train),
                f64::from_bits(*eps_attack)
            )
        } else {
            format!(
                "{attack} train={} atk={}",
                f64::from_bits(*eps_train),
                f64::from_bits(*eps_attack)
            )
        };
        legend_entry(&mut svg, gi, color, &label);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn defined_rows(report: &EvalReport) -> Result<Vec<&EvalRow>> {
    let rows: Vec<&EvalRow> = report.rows.iter().filter(|r| r.asr.is_some()).collect();
    if rows.is_empty() {
        return Err(Error::Argument(
            "report has no rows with a defined success rate".into(),
        ));
    }
    Ok(rows)
}

fn open_svg() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    )
}

/// x in [0, 1] to pixel.
fn px(x: f64) -> f64 {
    ML + x.clamp(0.0, 1.0) * (W - ML - MR)
}

/// y in [0, 1] to pixel (origin bottom-left).
fn py(y: f64) -> f64 {
    H - MB - y.clamp(0.0, 1.0) * (H - MT - MB)
}

fn axes(svg: &mut String, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <text x=\"{2:.2}\" y=\"{3}\" font-size=\"12\" text-anchor=\"middle\">{xlabel}</text>\n\
         <text x=\"14\" y=\"{4:.2}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {4:.2})\">{ylabel}</text>",
        H - MB,
        W - MR,
        ML + (W - ML - MR) / 2.0,
        H - 10.0,
        MT + (H - MT - MB) / 2.0,
    );
}

fn xtick(svg: &mut String, frac: f64, label: &str) {
    let x = px(frac);
    let y = H - MB;
    let _ = writeln!(
        svg,
        "<line x1=\"{x:.2}\" y1=\"{y}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{x:.2}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{label}</text>",
        y + 4.0,
        y + 16.0,
    );
}

fn ytick(svg: &mut String, frac: f64, label: &str) {
    let y = py(frac);
    let _ = writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{ML}\" y2=\"{y:.2}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"end\">{label}</text>",
        ML - 4.0,
        ML - 7.0,
        y + 3.0,
    );
}

fn legend_entry(svg: &mut String, slot: usize, color: &str, label: &str) {
    let x = W - MR + 10.0;
    let y = MT + 12.0 + slot as f64 * 16.0;
    let _ = writeln!(
        svg,
        "<rect x=\"{x}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{label}</text>",
        y - 9.0,
        x + 14.0,
        y,
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackKind;

    fn row(m: usize, eps_attack: f64, asr: Option<f64>, seed: u64) -> EvalRow {
        EvalRow {
            m,
            epsilon_train: 0.3,
            attack: AttackKind::Pgd,
            epsilon_attack: eps_attack,
            eot_samples: 1,
            clean_accuracy: 0.95 - 0.01 * m as f64,
            asr,
            memory_bytes: (m * 100) as u64,
            master_seed: seed,
            attack_seed: 1,
            eval_seed: 2,
            wall_time_s: 0.0,
        }
    }

    fn report() -> EvalReport {
        EvalReport {
            rows: vec![
                row(1, 0.1, Some(0.6), 1),
                row(1, 0.3, Some(0.9), 1),
                row(4, 0.1, Some(0.2), 1),
                row(4, 0.3, Some(0.5), 1),
                row(4, 0.3, Some(0.7), 2), // second seed, averaged in
            ],
        }
    }

    #[test]
    fn line_plot_is_deterministic_and_grouped() {
        let a = asr_vs_epsilon_svg(&report()).unwrap();
        let b = asr_vs_epsilon_svg(&report()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.starts_with("<svg "));
        assert!(a.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn seed_average_lands_between_the_rates() {
        // m = 4 at budget 0.3 averages 0.5 and 0.7; the y pixel must sit at
        // the 0.6 position.
        let svg = asr_vs_epsilon_svg(&report()).unwrap();
        let y = py(0.6);
        assert!(svg.contains(&format!("{y:.2}")));
    }

    #[test]
    fn scatter_plot_marks_each_pool_size() {
        let svg = tradeoff_svg(&report()).unwrap();
        assert_eq!(svg.matches("<circle").count(), 4); // (m, eps_attack) groups
        assert!(svg.contains(">m=1<"));
        assert!(svg.contains(">m=4<"));
    }

    #[test]
    fn undefined_only_reports_are_rejected() {
        let r = EvalReport {
            rows: vec![row(1, 0.1, None, 1)],
        };
        assert!(asr_vs_epsilon_svg(&r).is_err());
        assert!(tradeoff_svg(&r).is_err());
        assert!(asr_vs_epsilon_svg(&EvalReport::default()).is_err());
    }

    #[test]
    fn coordinates_stay_inside_the_canvas() {
        let svg = asr_vs_epsilon_svg(&report()).unwrap();
        for part in svg.split("points=\"").skip(1) {
            let pts = part.split('"').next().unwrap();
            for pair in pts.split_whitespace() {
                let (x, y) = pair.split_once(',').unwrap();
                let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
                assert!((0.0..=W).contains(&x) && (0.0..=H).contains(&y));
            }
        }
    }
}
