//! Repo-owned prompt templates.

use super::{CoordinateSpace, Orientation};

pub fn comprehend_prompt(question: &str) -> String {
    format!(
        "You are looking at a screenshot of a professional CAD application.\n\
         Task: {question}\n\
         Reply with a concise 5-10 word operational description of the single \
         GUI operation that accomplishes the task (for example, which button or \
         menu item to click). Reply with the description only."
    )
}

pub fn ground_prompt(instruction: &str, space: CoordinateSpace, width: u32, height: u32) -> String {
    let format = match space {
        CoordinateSpace::Normalized => {
            "Answer with the click position as (x, y), where x and y are fractions \
             of the image width and height in [0, 1]."
                .to_string()
        }
        CoordinateSpace::AbsolutePixels => format!(
            "Answer with the click position as click(x, y) in pixels of the \
             {width}x{height} screenshot, origin at the top-left corner."
        ),
    };
    format!("Instruction: {instruction}\nWhere should the mouse click to carry out this instruction? {format}")
}

pub fn validator_prompt(question: &str) -> String {
    format!(
        "The red marker shows a proposed click for this task: {question}. \
         Does clicking there accomplish the task? Answer Yes or No."
    )
}

pub fn judge_prompt(question: &str, reference: &str, candidate: &str, orientation: Orientation) -> String {
    let criterion = match orientation {
        Orientation::Precision => {
            "Is every claim in the candidate supported by the reference? \
             Penalize operations, controls or values that the reference does not mention."
        }
        Orientation::Recall => {
            "Does the candidate cover the reference's required operation? \
             Penalize any required control or step the candidate omits."
        }
    };
    format!(
        "You grade answers to questions about operating CAD software.\n\
         Question: {question}\n\
         Reference answer: {reference}\n\
         Candidate answer: {candidate}\n\
         {criterion}\n\
         Reply with exactly one word: FULL (full compliance), PARTIAL (partial \
         compliance) or NONE (non-compliance)."
    )
}
