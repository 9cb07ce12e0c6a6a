//! Question schemas: the ordered per-question response vocabularies that
//! define the observation space.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved schema source name for the built-in vocabularies.
pub const BUILTIN_PHENDO: &str = "phendo";

/// Separator between question id and token in the pooled vocabulary.
pub const POOLED_SEPARATOR: char = ':';
pub const POOLED_QUESTION_ID: &str = "pooled";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(rename = "name")]
    pub display_name: String,
    /// Responses arrive as free text and are resolved through a
    /// [`MappingDictionary`](crate::corpus::MappingDictionary).
    #[serde(default)]
    pub free_text: bool,
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    #[serde(rename = "question", default)]
    questions: Vec<Question>,
}

/// Validated, hashed question schema. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct QuestionSchema {
    questions: Vec<Question>,
    hash: String,
    offsets: Vec<usize>,
    question_lookup: HashMap<String, usize>,
    token_lookup: Vec<HashMap<String, usize>>,
}

impl PartialEq for QuestionSchema {
    fn eq(&self, other: &Self) -> bool {
        self.hash == other.hash && self.questions == other.questions
    }
}

impl Eq for QuestionSchema {}

impl TryFrom<SchemaFile> for QuestionSchema {
    type Error = Error;

    fn try_from(file: SchemaFile) -> Result<Self> {
        QuestionSchema::new(file.questions)
    }
}

impl From<QuestionSchema> for SchemaFile {
    fn from(schema: QuestionSchema) -> Self {
        SchemaFile {
            questions: schema.questions,
        }
    }
}

impl QuestionSchema {
    pub fn new(questions: Vec<Question>) -> Result<Self> {
        if questions.is_empty() {
            return Err(Error::Schema("schema has no questions".into()));
        }
        let mut question_lookup = HashMap::with_capacity(questions.len());
        let mut token_lookup = Vec::with_capacity(questions.len());
        let mut offsets = Vec::with_capacity(questions.len() + 1);
        let mut offset = 0;
        for (qi, q) in questions.iter().enumerate() {
            if q.id.is_empty() || q.id.chars().any(|c| c.is_whitespace()) {
                return Err(Error::Schema(format!(
                    "question id {:?} must be non-empty without whitespace",
                    q.id
                )));
            }
            if question_lookup.insert(q.id.clone(), qi).is_some() {
                return Err(Error::Schema(format!("duplicate question id '{}'", q.id)));
            }
            if q.vocabulary.len() < 2 {
                return Err(Error::Schema(format!(
                    "vocabulary too small for question '{}': {} token(s), need at least 2",
                    q.id,
                    q.vocabulary.len()
                )));
            }
            let mut tokens = HashMap::with_capacity(q.vocabulary.len());
            for (v, tok) in q.vocabulary.iter().enumerate() {
                if tok.is_empty() || tok.contains(['\t', '\n', '\r']) {
                    return Err(Error::Schema(format!(
                        "invalid token {tok:?} in question '{}'",
                        q.id
                    )));
                }
                if tokens.insert(tok.clone(), v).is_some() {
                    return Err(Error::Schema(format!(
                        "duplicate token '{tok}' in question '{}'",
                        q.id
                    )));
                }
            }
            token_lookup.push(tokens);
            offsets.push(offset);
            offset += q.vocabulary.len();
        }
        offsets.push(offset);
        let hash = content_hash(&questions);
        Ok(QuestionSchema {
            questions,
            hash,
            offsets,
            question_lookup,
            token_lookup,
        })
    }

    /// The thirteen tracked questions of the Phendo app.
    pub fn phendo() -> Self {
        let questions = PHENDO
            .iter()
            .map(|(id, name, free_text, vocab)| Question {
                id: id.to_string(),
                display_name: name.to_string(),
                free_text: *free_text,
                vocabulary: vocab.iter().map(|t| t.to_string()).collect(),
            })
            .collect();
        QuestionSchema::new(questions).expect("built-in schema is valid")
    }

    /// Loads a schema file, or the built-in schema for the reserved name
    /// `"phendo"`.
    pub fn load(source: impl AsRef<Path>) -> Result<Self> {
        let path = source.as_ref();
        if path.as_os_str() == BUILTIN_PHENDO {
            return Ok(Self::phendo());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: SchemaFile = toml::from_str(text).map_err(|e| Error::parse("<schema>", e))?;
        QuestionSchema::try_from(file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&SchemaFile::from(self.clone())).expect("schema serialises")
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn question(&self, q: usize) -> &Question {
        &self.questions[q]
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn vocab_size(&self, q: usize) -> usize {
        self.questions[q].vocabulary.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.questions.iter().map(|q| q.vocabulary.len()).collect()
    }

    /// Total vocabulary size across questions.
    pub fn total_vocab(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Start of question `q` in the flattened (question, token) index space.
    pub fn offset(&self, q: usize) -> usize {
        self.offsets[q]
    }

    pub fn question_index(&self, id: &str) -> Option<usize> {
        self.question_lookup.get(id).copied()
    }

    pub fn token_index(&self, q: usize, token: &str) -> Option<usize> {
        self.token_lookup[q].get(token).copied()
    }

    /// Hex SHA-256 over the canonical schema content.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Single-question schema whose vocabulary is the disjoint union of all
    /// vocabularies, each token prefixed with its question id.
    pub fn pooled(&self) -> QuestionSchema {
        let vocabulary = self
            .questions
            .iter()
            .flat_map(|q| {
                q.vocabulary
                    .iter()
                    .map(move |t| format!("{}{POOLED_SEPARATOR}{t}", q.id))
            })
            .collect();
        QuestionSchema::new(vec![Question {
            id: POOLED_QUESTION_ID.to_string(),
            display_name: "All questions (pooled)".to_string(),
            free_text: false,
            vocabulary,
        }])
        .expect("pooled schema inherits validity")
    }
}

fn content_hash(questions: &[Question]) -> String {
    let mut canon = String::from("mmpheno-schema-v1\n");
    for q in questions {
        let _ = writeln!(canon, "Q\t{}\t{}\t{}", q.id, q.display_name, q.free_text);
        for t in &q.vocabulary {
            let _ = writeln!(canon, "V\t{t}");
        }
    }
    hex::encode(Sha256::digest(canon.as_bytes()))
}

const PHENDO: &[(&str, &str, bool, &[&str])] = &[
    (
        "pain_location",
        "Where is the pain",
        false,
        &[
            "bones_pain", "cervix_pain", "deep_vagina_pain", "diaphragm_pain", "head_pain",
            "inner_thighs_pain", "intestines_pain", "joints_pain", "left_arm_pain",
            "left_breast_pain", "left_leg_pain", "left_lower_back_pain", "left_outer_hip_pain",
            "left_ovary_pain", "left_pelvis_pain", "left_ribs_pain", "left_shoulder_pain",
            "left_side_abdomen_pain", "legs_pain", "lower_back_pain", "lower_chest_pain",
            "neck_pain", "pelvis_pain", "rectum_pain", "right_arm_pain", "right_breast_pain",
            "right_leg_pain", "right_lower_back_pain", "right_outer_hip_pain",
            "right_ovary_pain", "right_pelvis_pain", "right_ribs_pain", "right_shoulder_pain",
            "right_side_abdomen_pain", "upper_abdomen_pain", "upper_chest_pain", "uterus_pain",
            "vagina_entrance_pain", "whole_abdomen_pain",
        ],
    ),
    (
        "pain_description",
        "Describe the pain",
        false,
        &[
            "aching_pain", "burning_pain", "cramping_pain", "deep_pain", "dull_pain",
            "nauseating_pain", "pressure_pain", "pulling_pain", "pulsating_pain",
            "radiating_pain", "sharp_pain", "shooting_pain", "stabbing_pain", "throbbing_pain",
            "twisting_pain",
        ],
    ),
    (
        "pain_severity",
        "How severe is the pain?",
        false,
        &[
            "mild_pain", "moderate_pain", "severe_pain",
        ],
    ),
    (
        "other_symptoms",
        "What are you experiencing",
        false,
        &[
            "allergies", "asthma", "blurry_vision", "chest_pressure", "dizziness", "eczema",
            "fatigue", "fever", "headache", "hives", "hot_flash", "itchy", "mentally_foggy",
            "noise_sensitivity", "numbness", "rash", "ringing_in_ears", "sinus_congestion",
            "sweaty", "swelling", "touch_sensitivity",
        ],
    ),
    (
        "other_symptoms_severity",
        "How severe is the symptom",
        false,
        &[
            "mild_symptoms", "moderate_symptoms", "severe_symptoms",
        ],
    ),
    (
        "period_flow",
        "Describe the flow",
        false,
        &[
            "heavy_flow", "light_flow", "medium_flow",
        ],
    ),
    (
        "bleeding",
        "What kind of bleeding",
        false,
        &[
            "breakthrough_bleeding", "clots", "no_bleeding", "spotting",
        ],
    ),
    (
        "gi_gu_symptoms",
        "Describe GI/GU system",
        false,
        &[
            "blood_in_stool", "cant_urinate", "constipation", "diarrhea", "endo_belly",
            "frequent_urination", "gas", "heartburn", "mouth_sores", "nausea",
            "painful_bowel_movement", "painful_urination", "stomach_upset",
            "uncomfortably_full", "vomiting",
        ],
    ),
    (
        "gi_gu_severity",
        "How severe is it",
        false,
        &[
            "mild_GI", "moderate_GI", "severe_GI",
        ],
    ),
    (
        "sex",
        "Describe sex",
        false,
        &[
            "avoided_sex", "bleeding_from_sex", "no_sex", "painful_after_sex",
            "painful_during_sex", "sex_felt_good",
        ],
    ),
    (
        "activities",
        "Activities",
        false,
        &[
            "climb_stairs", "eat", "get_dressed", "get_out_of_bed", "have_sex", "housework",
            "jump", "kneel", "lie_down", "lift", "no_trouble", "prepare_food", "run", "shop",
            "shower", "sit_down", "sleep", "socialize", "stand", "stretch", "use_toilet",
            "walk", "work",
        ],
    ),
    (
        "day_quality",
        "How was your day?",
        false,
        &[
            "bad_day", "good_day", "great_day", "manageable_day", "unbearable_day",
        ],
    ),
    (
        "medications",
        "Medications/hormones taken",
        true,
        &[
            "adrenergic_agonists", "amphetamine", "analgesic", "analgesic/narcotic",
            "analgesic/nsaids", "analgesic/opioids", "anesthetic", "anorectic",
            "anti-inflammatory", "antiacid", "antiacid/nsaids", "antibiotics",
            "anticholinergic", "anticoagulant", "anticonvulsant", "antidepressant",
            "antidiabetic_medication", "antidiarrheal", "antiemetic", "antihistamine",
            "antihypertensive", "antipsychotic", "antispasmodic", "antispasmodic/sedative",
            "anxiolytic", "anxiolytic/anesthetic/muscle_relaxant", "barbituate",
            "barbituate/analgesic", "beta_blocker", "bronchodilator",
            "calcium_channel_blocker", "cough_medicine", "decongestant", "diuretic",
            "dopamine_agonist", "estrogen", "estrogen/progestin",
            "gonadotropin-releasing_hormone_agonist",
            "gonadotropin-releasing_hormone_antagonist", "hormone_based_chemotherapy",
            "hormone_replacement_therapy", "human_chorionic_gonadotropin",
            "human_follicle_stimulating_hormone", "laxative", "muscle_relaxant", "narcotic",
            "narcotic/nsaids", "neuropathic_pain_medication", "no_med_hormones", "noclass",
            "nonbenzodiazepine_hypnotic", "nsaids", "opioids", "progestin", "sedative",
            "statin", "steroid", "stimulant", "thyroid_hormones",
            "topical_anti-tumor_medication", "triptan", "vasoconstrictor",
            "vitamin_a_derivative",
        ],
    ),
];
