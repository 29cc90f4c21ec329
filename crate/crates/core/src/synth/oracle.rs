//! Scripted oracle that navigates synthetic slides the way a careful reader
//! would: find tissue on the thumbnail, then zoom into every dark mark until
//! it is seen at native resolution and either matches a glyph class or is
//! dismissed as a decoy.
//!
//! The oracle is stateless: on every call it replays its plan from the
//! conversation, using only the text and images the loop sent it.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use image::RgbImage;

use super::glyphs::{Candidate, GlyphSet, Matcher};
use crate::agent::action::Action;
use crate::agent::backend::{BackendError, Completion, LmmBackend};
use crate::agent::conversation::{Conversation, Message, Role};
use crate::agent::prompts::choice_letter;
use crate::par::Execution;
use crate::pyramid::Region;
use crate::raster;
use crate::tissue::{connected_components, segment_raster, SegmentParams};

/// Answer given when nothing was identified; never a valid choice.
pub const UNDETERMINED: &str = "undetermined";
/// Crops rendered at or above this scale are treated as native resolution.
const NATIVE_SCALE: f64 = 0.95;
/// Level-0 padding around blob boxes.
const BLOB_PAD: i64 = 64;
/// Thumbnail components below this fraction of the raster are ignored.
const MIN_BLOB_FRACTION: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    /// Survey of a tissue blob: follow every mark.
    Blob(Region),
    /// Zoom on one mark: follow only the mark nearest the centre.
    Focus(Region),
}

impl Target {
    fn region(&self) -> Region {
        match *self {
            Target::Blob(r) | Target::Focus(r) => r,
        }
    }
}

/// What one crop revealed.
#[derive(Debug, Clone)]
struct CropFindings {
    /// Mark centres in level-0 pixels, in reading order.
    marks: Vec<(f64, f64)>,
    native: bool,
    /// Identified class, when a native mark matched.
    class: Option<usize>,
}

pub struct OracleBackend {
    set: GlyphSet,
    matcher: Matcher,
    memo: Mutex<HashMap<String, Arc<CropFindings>>>,
}

impl Default for OracleBackend {
    fn default() -> Self {
        Self::new(GlyphSet::standard())
    }
}

fn token_int(text: &str, key: &str) -> Option<i64> {
    text.split(|c: char| c.is_whitespace() || c == ',' || c == '(' || c == ')')
        .find_map(|tok| tok.strip_prefix(key))
        .and_then(|v| v.trim_end_matches(|c: char| !c.is_ascii_digit()).parse().ok())
}

/// `x=…, y=…, w=…, h=…` from a prompt line.
fn parse_region(text: &str) -> Option<Region> {
    Some(Region::new(
        token_int(text, "x=")?,
        token_int(text, "y=")?,
        token_int(text, "w=")?,
        token_int(text, "h=")?,
    ))
}

/// `A) name` lines of the choices block.
fn parse_choices(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| {
            let mut chars = l.chars();
            let (c, p) = (chars.next()?, chars.next()?);
            (c.is_ascii_uppercase() && p == ')').then(|| chars.as_str().trim().to_string())
        })
        .collect()
}

fn first_image(m: &Message) -> Option<&Arc<RgbImage>> {
    m.images().next()
}

fn centered_square(cx: f64, cy: f64, side: i64, slide: (i64, i64)) -> Region {
    let clamp_axis = |c: f64, extent: i64| -> (i64, i64) {
        let s = side.min(extent);
        let start = (c - s as f64 / 2.0).round() as i64;
        (start.clamp(0, extent - s), s)
    };
    let (x, w) = clamp_axis(cx, slide.0);
    let (y, h) = clamp_axis(cy, slide.1);
    Region::new(x, y, w, h)
}

impl OracleBackend {
    pub fn new(set: GlyphSet) -> Self {
        OracleBackend {
            matcher: Matcher::new(&set),
            set,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn matcher(&self) -> &Matcher {
        &self.matcher
    }

    fn answer_text(&self, class: usize, choices: &[String]) -> String {
        let name = self.set.class(class).0;
        match choices.iter().position(|c| c == name) {
            Some(i) => choice_letter(i).to_string(),
            None => name.to_string(),
        }
    }

    /// Tissue blobs on the thumbnail, largest first, as padded level-0 boxes.
    fn blobs(&self, thumb: &RgbImage, slide: (i64, i64)) -> Vec<Region> {
        let (tw, th) = (thumb.width() as usize, thumb.height() as usize);
        let bits = segment_raster(thumb, &SegmentParams::default(), Execution::Sequential);
        let (labels, sizes) = connected_components(&bits, tw, th);
        let mut boxes: Vec<(usize, [usize; 4])> = sizes
            .iter()
            .map(|&s| (s, [usize::MAX, usize::MAX, 0, 0]))
            .collect();
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let (x, y) = (i % tw, i / tw);
            let b = &mut boxes[l as usize].1;
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x + 1);
            b[3] = b[3].max(y + 1);
        }
        let min = (MIN_BLOB_FRACTION * (tw * th) as f64) as usize;
        let mut found: Vec<(usize, [usize; 4])> = boxes.into_iter().skip(1).filter(|(s, _)| *s >= min.max(1)).collect();
        found.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let (sx, sy) = (slide.0 as f64 / tw as f64, slide.1 as f64 / th as f64);
        found
            .into_iter()
            .map(|(_, b)| {
                let x0 = ((b[0] as f64 * sx).floor() as i64 - BLOB_PAD).max(0);
                let y0 = ((b[1] as f64 * sy).floor() as i64 - BLOB_PAD).max(0);
                let x1 = ((b[2] as f64 * sx).ceil() as i64 + BLOB_PAD).min(slide.0);
                let y1 = ((b[3] as f64 * sy).ceil() as i64 + BLOB_PAD).min(slide.1);
                Region::new(x0, y0, x1 - x0, y1 - y0)
            })
            .collect()
    }

    fn examine(&self, img: &RgbImage, region: &Region) -> Arc<CropFindings> {
        let key = format!("{}:{region}", raster::pixel_digest(img));
        if let Some(hit) = self.memo.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let scale = (img.width() as f64 / region.w as f64).min(img.height() as f64 / region.h as f64);
        let native = scale >= NATIVE_SCALE;
        let cands: Vec<Candidate> = self.matcher.candidates(img, scale);
        let class = if native {
            cands.iter().find_map(|&c| {
                self.matcher
                    .score(img, c, scale)
                    .filter(|m| m.score >= super::glyphs::MATCH_NCC)
                    .map(|m| m.class)
            })
        } else {
            None
        };
        let marks = cands
            .iter()
            .map(|c| (region.x as f64 + c.cx / scale, region.y as f64 + c.cy / scale))
            .collect();
        let findings = Arc::new(CropFindings { marks, native, class });
        self.memo.lock().unwrap().insert(key, findings.clone());
        findings
    }

    /// Single-turn question (baselines): identify from the one image given.
    fn single_shot(&self, first: &Message, choices: &[String]) -> String {
        let Some(img) = first_image(first) else {
            return UNDETERMINED.into();
        };
        let text = first.joined_text();
        let scale = parse_region(&text)
            .map(|r| (img.width() as f64 / r.w as f64).min(img.height() as f64 / r.h as f64))
            .unwrap_or(1.0);
        match self.matcher.identify(img, scale) {
            Some((_, m)) => self.answer_text(m.class, choices),
            None => UNDETERMINED.into(),
        }
    }

    fn navigate(&self, conv: &Conversation, choices: &[String]) -> Result<String, BackendError> {
        let first = &conv.messages[0];
        let text = first.joined_text();
        let slide = (
            token_int(&text, "width=").ok_or_else(|| BackendError::Malformed("no slide width in prompt".into()))?,
            token_int(&text, "height=").ok_or_else(|| BackendError::Malformed("no slide height in prompt".into()))?,
        );
        let thumb = first_image(first).ok_or_else(|| BackendError::Malformed("no thumbnail".into()))?;
        let blobs = self.blobs(thumb, slide);
        let mut queue: VecDeque<Target> = blobs.iter().map(|&r| Target::Blob(r)).collect();
        let mut found: Option<usize> = None;
        let mut seen_marks = 0usize;
        let mut decoys = 0usize;

        for msg in conv.messages.iter().skip(1).filter(|m| m.role == Role::User) {
            let Some(img) = first_image(msg) else { continue };
            let Some(region) = parse_region(&msg.joined_text()) else { continue };
            let target = queue.pop_front();
            let f = self.examine(img, &region);
            seen_marks += f.marks.len();
            if let Some(c) = f.class {
                found = Some(c);
                break;
            }
            if f.native {
                if matches!(target, Some(Target::Focus(_))) {
                    decoys += 1;
                }
                continue;
            }
            let s_long = img.width().max(img.height()) as i64;
            let child_side = if region.long_side() / 2 <= s_long { s_long } else { region.long_side() / 2 };
            match target {
                Some(Target::Blob(_)) | None => {
                    for &(mx, my) in f.marks.iter().rev() {
                        queue.push_front(Target::Focus(centered_square(mx, my, child_side, slide)));
                    }
                }
                Some(Target::Focus(_)) => {
                    let (cx, cy) = region.center();
                    if let Some(&(mx, my)) = f
                        .marks
                        .iter()
                        .min_by(|a, b| (a.0 - cx).hypot(a.1 - cy).total_cmp(&(b.0 - cx).hypot(b.1 - cy)))
                    {
                        queue.push_front(Target::Focus(centered_square(mx, my, child_side, slide)));
                    }
                }
            }
        }

        let last = conv.last().expect("conversation has the initial message");
        let forced = last.role == Role::User && conv.messages.len() > 1 && first_image(last).is_none();
        if let Some(c) = found {
            let reply = Action::Final {
                answer: self.answer_text(c, choices),
            };
            return Ok(format!(
                "The mark at native resolution matches glyph class {}.\n{}",
                self.set.class(c).0,
                reply.to_json()
            ));
        }
        let give_up = Action::Final {
            answer: UNDETERMINED.into(),
        };
        if forced {
            return Ok(give_up.to_json());
        }
        match queue.front() {
            Some(t) => {
                let why = match t {
                    Target::Blob(_) => format!("Surveying tissue blob ({} found on the thumbnail).", blobs.len()),
                    Target::Focus(_) => format!(
                        "Zooming in on a dark mark ({seen_marks} mark sightings so far, {decoys} dismissed as decoys)."
                    ),
                };
                Ok(format!("{why}\n{}", Action::crop(t.region()).to_json()))
            }
            None => Ok(format!("Every mark has been inspected without a match.\n{}", give_up.to_json())),
        }
    }
}

impl LmmBackend for OracleBackend {
    fn complete(&self, conv: &Conversation) -> Result<Completion, BackendError> {
        let first = conv
            .messages
            .first()
            .ok_or_else(|| BackendError::Malformed("empty conversation".into()))?;
        let text = first.joined_text();
        let choices = parse_choices(&text);
        let reply = if text.contains("\"action\": \"crop\"") {
            self.navigate(conv, &choices)?
        } else {
            self.single_shot(first, &choices)
        };
        Ok(Completion::text(reply))
    }

    fn name(&self) -> &str {
        "oracle"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_parsing() {
        let t = "Crop 2 of 19: region x=100, y=200, w=1500, h=1400 (level-0), rendered at 1000x933.";
        assert_eq!(parse_region(t), Some(Region::new(100, 200, 1500, 1400)));
        let s = "Slide size (level-0 pixels): width=4096, height=2048.";
        assert_eq!(token_int(s, "width="), Some(4096));
        assert_eq!(token_int(s, "height="), Some(2048));
        assert_eq!(parse_region(s), None);
        assert_eq!(parse_choices("Choices:\nA) alpha\nB) beta\n"), vec!["alpha", "beta"]);
    }

    #[test]
    fn squares_stay_on_the_slide() {
        assert_eq!(centered_square(100.0, 3000.0, 1000, (4096, 4096)), Region::new(0, 2500, 1000, 1000));
        assert_eq!(centered_square(4000.0, 4000.0, 1000, (4096, 4096)), Region::new(3096, 3096, 1000, 1000));
        assert_eq!(centered_square(50.0, 50.0, 5000, (4096, 3000)), Region::new(0, 0, 4096, 3000));
    }
}
