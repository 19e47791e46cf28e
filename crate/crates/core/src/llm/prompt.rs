//! Prompt assembly from the frozen text assets.

use serde::{Deserialize, Serialize};

use crate::env::{Action, Role, RoomCoord};
use crate::policy::Behavior;
use crate::repr::{render_action, BehaviorRepresentation, ReprError};

pub const ENV_DESCRIPTION: &str = include_str!("../../assets/env_description.txt");
pub const BR_DESCRIPTION: &str = include_str!("../../assets/br_description.txt");
pub const PREDICTION_PROMPT: &str = include_str!("../../assets/prediction_prompt.txt");

const ICL_ASSETS: [(Behavior, &str); 3] = [
    (Behavior::Explore, include_str!("../../assets/icl_explore.txt")),
    (Behavior::Exploit, include_str!("../../assets/icl_exploit.txt")),
    (Behavior::Fixed, include_str!("../../assets/icl_fixed.txt")),
];

const ACTION_HEADER: &str = "Action taken by the ";
const EXPLANATION_CUE: &str = "Explanation:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub behavior: Behavior,
    pub role: Role,
    pub features_block: String,
    pub action_line: String,
    pub explanation: String,
}

impl IclExample {
    fn parse(behavior: Behavior, text: &str) -> Option<Self> {
        let (features_block, rest) = text.split_once(&format!("\n\n{ACTION_HEADER}"))?;
        let (role, rest) = rest.split_once(":\n\n")?;
        let (action_line, rest) = rest.split_once(&format!("\n\n{EXPLANATION_CUE}\n\n"))?;
        Some(Self {
            behavior,
            role: role.parse().ok()?,
            features_block: features_block.to_string(),
            action_line: action_line.to_string(),
            explanation: rest.trim_end().to_string(),
        })
    }

    pub fn render(&self) -> String {
        format!(
            "{}\n\n{}\n\n{EXPLANATION_CUE}\n\n{}",
            self.features_block,
            action_section(self.role, &self.action_line),
            self.explanation
        )
    }
}

/// The three worked examples in Explore, Exploit, Fixed order.
pub fn icl_examples() -> Vec<IclExample> {
    ICL_ASSETS
        .iter()
        .map(|(b, text)| IclExample::parse(*b, text).expect("malformed ICL asset"))
        .collect()
}

fn action_section(role: Role, action_line: &str) -> String {
    format!("{ACTION_HEADER}{role}:\n\n{action_line}")
}

pub fn prediction_prompt(role: Role) -> String {
    PREDICTION_PROMPT.trim_end().replace("{role}", role.name())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub env_description: String,
    pub br_description: String,
    pub icl_examples: Vec<IclExample>,
    pub query_block: String,
}

impl PromptBundle {
    /// Environment and representation descriptions, sent as the system message.
    pub fn system_text(&self) -> String {
        format!("{}\n\n{}", self.env_description.trim_end(), self.br_description.trim_end())
    }

    /// Worked examples followed by the query, sent as the first user message.
    pub fn user_text(&self) -> String {
        let mut parts: Vec<String> = self.icl_examples.iter().map(IclExample::render).collect();
        parts.push(self.query_block.clone());
        parts.join("\n\n")
    }

    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system_text(), self.user_text())
    }
}

pub fn build_prompt(
    br: &BehaviorRepresentation,
    role: Role,
    from: RoomCoord,
    action: Action,
) -> Result<PromptBundle, ReprError> {
    let action_line = render_action(role, from, action)?;
    let mut sections = Vec::new();
    if let Some(block) = br.render()? {
        sections.push(block);
    }
    sections.push(action_section(role, &action_line));
    sections.push(EXPLANATION_CUE.to_string());
    Ok(PromptBundle {
        env_description: ENV_DESCRIPTION.to_string(),
        br_description: BR_DESCRIPTION.to_string(),
        icl_examples: icl_examples(),
        query_block: sections.join("\n\n"),
    })
}

/// Last action sentence that follows an action header in `text`.
pub fn find_action_line(text: &str) -> Option<&str> {
    let at = text.rfind(ACTION_HEADER)?;
    text[at..].lines().skip(1).map(str::trim).find(|l| !l.is_empty())
}
