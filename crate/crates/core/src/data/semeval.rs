use std::path::Path;

use roxmltree::{Document, Node};

use super::{Opinion, RawReview};
use crate::error::{Error, Result};

pub fn parse_semeval_xml(path: impl AsRef<Path>) -> Result<Vec<RawReview>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_semeval_xml_str(&text, path)
}

/// Parses SemEval-style review XML. A `Review` carrying its own
/// `Opinions` child is one unit; otherwise each in-scope `sentence`
/// becomes a unit. Files with no `Review` elements are read sentence by
/// sentence.
pub fn parse_semeval_xml_str(text: &str, origin: &Path) -> Result<Vec<RawReview>> {
    let doc = Document::parse(text).map_err(|e| Error::ParseLine {
        path: origin.to_path_buf(),
        line: e.pos().row as usize,
        message: e.to_string(),
    })?;
    let located = |node: Node, message: String| Error::ParseLine {
        path: origin.to_path_buf(),
        line: doc.text_pos_at(node.range().start).row as usize,
        message,
    };

    let reviews: Vec<Node> = doc.descendants().filter(|n| n.has_tag_name("Review")).collect();
    let mut out = Vec::new();
    if reviews.is_empty() {
        for sentence in doc.descendants().filter(|n| n.has_tag_name("sentence")) {
            push_sentence(sentence, "", &mut out, &located)?;
        }
        return Ok(out);
    }

    for review in reviews {
        let rid = review.attribute("rid").unwrap_or_default();
        match child(review, "Opinions") {
            Some(opinions) => {
                let text = match child(review, "text") {
                    Some(t) => t.text().unwrap_or_default().to_string(),
                    None => review
                        .descendants()
                        .filter(|n| n.has_tag_name("sentence") && !out_of_scope(*n))
                        .filter_map(|s| child(s, "text").and_then(|t| t.text()))
                        .collect::<Vec<_>>()
                        .join(" "),
                };
                let ops = read_opinions(opinions, rid, &located)?;
                out.push(RawReview::new(rid, text, ops).map_err(|e| located(review, e.to_string()))?);
            }
            None => {
                for sentence in review.descendants().filter(|n| n.has_tag_name("sentence")) {
                    push_sentence(sentence, rid, &mut out, &located)?;
                }
            }
        }
    }
    Ok(out)
}

fn child<'a, 'input>(node: Node<'a, 'input>, tag: &str) -> Option<Node<'a, 'input>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn out_of_scope(sentence: Node) -> bool {
    sentence
        .attribute("OutOfScope")
        .is_some_and(|v| v.eq_ignore_ascii_case("true"))
}

fn push_sentence<F>(sentence: Node, rid: &str, out: &mut Vec<RawReview>, located: &F) -> Result<()>
where
    F: Fn(Node, String) -> Error,
{
    if out_of_scope(sentence) {
        return Ok(());
    }
    let id = sentence.attribute("id").unwrap_or(rid);
    let text = child(sentence, "text")
        .and_then(|t| t.text())
        .ok_or_else(|| located(sentence, format!("review {rid}: sentence {id} has no text")))?;
    let ops = match child(sentence, "Opinions") {
        Some(o) => read_opinions(o, rid, located)?,
        None => Vec::new(),
    };
    out.push(RawReview::new(id, text, ops).map_err(|e| located(sentence, e.to_string()))?);
    Ok(())
}

fn read_opinions<F>(opinions: Node, rid: &str, located: &F) -> Result<Vec<Opinion>>
where
    F: Fn(Node, String) -> Error,
{
    opinions
        .children()
        .filter(|n| n.has_tag_name("Opinion"))
        .map(|op| {
            let attr = |name: &str| {
                op.attribute(name)
                    .map(|v| v.trim().to_string())
                    .ok_or_else(|| located(op, format!("review {rid}: Opinion is missing `{name}`")))
            };
            Ok(Opinion {
                category: attr("category")?,
                polarity: attr("polarity")?,
            })
        })
        .collect()
}
