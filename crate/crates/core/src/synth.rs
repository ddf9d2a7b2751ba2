//! Seeded synthetic report corpora with a planted abnormality vocabulary.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::seeded_rng;
use crate::labeling::{AnnotationSet, Label};
use crate::report::{Report, ReportError, Sex};

const CUES: [&str; 40] = [
    "hemorrhage",
    "infarct",
    "edema",
    "mass",
    "hydrocephalus",
    "contusion",
    "abscess",
    "arachnoid cyst",
    "volume loss",
    "heterotopia",
    "encephalomalacia",
    "gliosis",
    "ischemia",
    "venous thrombosis",
    "aneurysm",
    "vascular malformation",
    "abnormal enhancement",
    "herniation",
    "midline shift",
    "restricted diffusion",
    "cortical dysplasia",
    "schizencephaly",
    "lissencephaly",
    "polymicrogyria",
    "hypoplasia",
    "agenesis",
    "calcification",
    "hematoma",
    "subdural collection",
    "leukomalacia",
    "demyelination",
    "craniosynostosis",
    "neoplasm",
    "metastasis",
    "ventriculomegaly",
    "microhemorrhage",
    "cavernoma",
    "cerebritis",
    "meningeal thickening",
    "stenosis",
];

const LOCATIONS: [&str; 10] = [
    "left frontal lobe",
    "right frontal lobe",
    "left parietal lobe",
    "right temporal lobe",
    "occipital lobes",
    "basal ganglia",
    "thalami",
    "cerebellum",
    "brainstem",
    "periventricular white matter",
];

const NORMAL_FINDINGS: [&str; 8] = [
    "The ventricles are normal in size and configuration.",
    "Myelination is appropriate for age.",
    "Gray-white matter differentiation is preserved.",
    "There is no mass effect or midline shift.",
    "No abnormal signal is seen in the brain parenchyma.",
    "The major intracranial flow voids are preserved.",
    "The cerebellar tonsils are normally positioned.",
    "No restricted diffusion is identified.",
];

const FILLER: [&str; 6] = [
    "The visualized paranasal sinuses are clear.",
    "The orbits are within normal limits.",
    "The calvarium is intact.",
    "Mild motion artifact is present.",
    "Incidental mucosal thickening in the maxillary sinus.",
    "The mastoid air cells are clear.",
];

const INCIDENTAL: [&str; 6] = [
    "a small pineal cyst",
    "a prominent perivascular space",
    "a mega cisterna magna",
    "a small developmental venous anomaly",
    "mild mucosal thickening",
    "a cavum septum pellucidum",
];

const NORMAL_IMPRESSIONS: [&str; 4] = [
    "Normal MRI of the brain.",
    "No acute intracranial abnormality.",
    "Unremarkable examination.",
    "No imaging evidence of intracranial pathology.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSynthSpec {
    pub seed: u64,
    pub n: usize,
    pub abnormal_fraction: f64,
    /// Share of abnormal reports whose cue appears only under FINDINGS.
    pub findings_only_fraction: f64,
    /// Share of abnormal reports whose findings read like an incidental finding.
    pub subtle_fraction: f64,
    pub first_year: i32,
    pub last_year: i32,
    pub sites: Vec<String>,
}

impl Default for ReportSynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 1000,
            abnormal_fraction: 0.92,
            findings_only_fraction: 0.3,
            subtle_fraction: 0.04,
            first_year: 2015,
            last_year: 2023,
            sites: vec!["SITE_A".into(), "SITE_B".into()],
        }
    }
}

fn cue<R: Rng>(rng: &mut R) -> &'static str {
    // Zipf-like draw so a long tail of cues is rare
    let weights: f64 = (1..=CUES.len()).map(|k| 1.0 / k as f64).sum();
    let mut u = rng.random::<f64>() * weights;
    for (k, c) in CUES.iter().enumerate() {
        u -= 1.0 / (k + 1) as f64;
        if u <= 0.0 {
            return c;
        }
    }
    CUES[CUES.len() - 1]
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str], k: usize) -> Vec<&'a str> {
    pool.choose_multiple(rng, k).copied().collect()
}

// abnormal and incidental sentences share templates, so the cue word carries the signal
fn cue_sentence<R: Rng>(rng: &mut R, c: &str, loc: &str) -> String {
    match rng.random_range(0..3) {
        0 => format!("There is {c} in the {loc}."),
        1 => format!("Findings of {c} in the {loc}."),
        _ => format!("Noted is {c} in the {loc}."),
    }
}

fn incidental_sentence<R: Rng>(rng: &mut R) -> String {
    let what = INCIDENTAL.choose(rng).expect("non-empty");
    let loc = LOCATIONS.choose(rng).expect("non-empty");
    cue_sentence(rng, what, loc)
}

/// Generates reports and matching two-reader annotations.
pub fn synth_reports(spec: &ReportSynthSpec) -> Result<(Vec<Report>, Vec<AnnotationSet>), ReportError> {
    let mut rng = seeded_rng(spec.seed);
    let mut reports = Vec::with_capacity(spec.n);
    let mut annotations = Vec::with_capacity(spec.n);
    let sites: Vec<&str> =
        if spec.sites.is_empty() { vec!["SITE_A"] } else { spec.sites.iter().map(String::as_str).collect() };
    for i in 0..spec.n {
        let abnormal = rng.random_bool(spec.abnormal_fraction);
        let mut findings: Vec<String> = Vec::new();
        let impression = if abnormal {
            let subtle = rng.random_bool(spec.subtle_fraction);
            let hidden = rng.random_bool(spec.findings_only_fraction);
            let c = cue(&mut rng);
            let loc = LOCATIONS.choose(&mut rng).expect("non-empty");
            if subtle {
                findings.push(incidental_sentence(&mut rng));
            } else {
                findings.push(cue_sentence(&mut rng, c, loc));
                if rng.random_bool(0.3) {
                    let (c2, loc2) = (cue(&mut rng), LOCATIONS.choose(&mut rng).expect("non-empty"));
                    findings.push(cue_sentence(&mut rng, c2, loc2));
                }
            }
            findings.extend(pick(&mut rng, &NORMAL_FINDINGS, 2).into_iter().map(String::from));
            if hidden || subtle {
                NORMAL_IMPRESSIONS.choose(&mut rng).expect("non-empty").to_string()
            } else {
                let mut s = format!("{c} in the {loc}.");
                s[..1].make_ascii_uppercase();
                s
            }
        } else {
            findings.extend(pick(&mut rng, &NORMAL_FINDINGS, 3).into_iter().map(String::from));
            for _ in 0..rng.random_range(0..=2) {
                findings.push(format!("No {} is seen.", cue(&mut rng)));
            }
            if rng.random_bool(0.3) {
                findings.push(incidental_sentence(&mut rng));
            }
            NORMAL_IMPRESSIONS.choose(&mut rng).expect("non-empty").to_string()
        };
        findings.extend(pick(&mut rng, &FILLER, 2).into_iter().map(String::from));
        let with_contrast = rng.random_bool(0.4);
        let procedure =
            if with_contrast { "MRI BRAIN WITH AND WITHOUT CONTRAST" } else { "MRI BRAIN WITHOUT CONTRAST" };
        let text = format!(
            "EXAM: {procedure}\nHISTORY: Routine clinical indication.\nTECHNIQUE: Multiplanar multisequence imaging.\nFINDINGS: {}\nIMPRESSION: {impression}",
            findings.join(" ")
        );
        let id = format!("rep_{i:06}");
        let year = rng.random_range(spec.first_year..=spec.last_year);
        let site = *sites.choose(&mut rng).expect("non-empty");
        let age_days = rng.random_range(135..=7100);
        let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
        reports.push(Report::new(id.clone(), text, year, site, age_days, sex, procedure)?);
        let grades = if abnormal { vec![0, 0] } else { vec![2, 2] };
        annotations.push(AnnotationSet { report_id: id, grades });
    }
    Ok((reports, annotations))
}

/// Labels implied by the synthetic annotations.
pub fn labels_of(annotations: &[AnnotationSet]) -> std::collections::BTreeMap<String, Label> {
    annotations.iter().filter_map(|a| a.label().ok().map(|l| (a.report_id.clone(), l))).collect()
}
