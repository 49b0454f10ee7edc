//! Category tables with the stuff / things / freespace partition.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type CategoryId = u32;
pub type InstanceId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "lowercase"))]
pub enum CategoryKind {
    /// Countable objects that carry instance ids.
    Things,
    /// Structural categories (wall, floor, ceiling) without instance identity.
    Stuff,
    /// Empty space; neither stuff nor things.
    Freespace,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    pub kind: CategoryKind,
}

/// Semantic category plus optional instance id of a face, voxel or segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Label {
    pub category: CategoryId,
    pub instance: Option<InstanceId>,
}

impl Label {
    pub const fn new(category: CategoryId, instance: Option<InstanceId>) -> Self {
        Self { category, instance }
    }

    pub const fn stuff(category: CategoryId) -> Self {
        Self::new(category, None)
    }

    pub const fn thing(category: CategoryId, instance: InstanceId) -> Self {
        Self::new(category, Some(instance))
    }
}

/// Ordered category table. The position of a category is its logit channel in
/// semantic prediction vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(
    feature = "serde",
    derive(Serialize, Deserialize),
    serde(try_from = "Vec<Category>", into = "Vec<Category>")
)]
pub struct CategoryTable {
    categories: Vec<Category>,
}

const THINGS: [&str; 9] = [
    "cabinet", "bed", "chair", "sofa", "table", "desk", "dresser", "lamp", "other",
];

pub const FREESPACE: CategoryId = 0;
pub const WALL: CategoryId = 10;
pub const FLOOR: CategoryId = 11;
pub const CEILING: CategoryId = 12;

impl CategoryTable {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let mut freespace = 0;
        for (n, c) in categories.iter().enumerate() {
            if categories[..n].iter().any(|o| o.id == c.id) {
                return Err(invalid(alloc::format!("duplicate category id {}", c.id)));
            }
            if c.kind == CategoryKind::Freespace {
                freespace += 1;
            }
        }
        if freespace != 1 {
            return Err(invalid("a category table needs exactly one freespace category"));
        }
        Ok(Self { categories })
    }

    /// 3D-Front style table: freespace, nine things categories, wall and floor.
    pub fn synthetic() -> Self {
        Self::preset(false)
    }

    /// Matterport3D style table: the synthetic table plus ceiling as stuff.
    pub fn real() -> Self {
        Self::preset(true)
    }

    fn preset(with_ceiling: bool) -> Self {
        let mut categories = Vec::new();
        categories.push(Category {
            id: FREESPACE,
            name: "freespace".to_string(),
            kind: CategoryKind::Freespace,
        });
        for (n, name) in THINGS.iter().enumerate() {
            categories.push(Category {
                id: n as CategoryId + 1,
                name: name.to_string(),
                kind: CategoryKind::Things,
            });
        }
        let mut stuff = alloc::vec![(WALL, "wall"), (FLOOR, "floor")];
        if with_ceiling {
            stuff.push((CEILING, "ceiling"));
        }
        for (id, name) in stuff {
            categories.push(Category {
                id,
                name: name.to_string(),
                kind: CategoryKind::Stuff,
            });
        }
        Self { categories }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter()
    }

    pub fn get(&self, id: CategoryId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn kind(&self, id: CategoryId) -> Option<CategoryKind> {
        self.get(id).map(|c| c.kind)
    }

    pub fn is_things(&self, id: CategoryId) -> bool {
        self.kind(id) == Some(CategoryKind::Things)
    }

    pub fn is_stuff(&self, id: CategoryId) -> bool {
        self.kind(id) == Some(CategoryKind::Stuff)
    }

    pub fn freespace(&self) -> CategoryId {
        self.categories
            .iter()
            .find(|c| c.kind == CategoryKind::Freespace)
            .map(|c| c.id)
            .expect("validated table has a freespace category")
    }

    /// Logit channel of a category.
    pub fn channel_of(&self, id: CategoryId) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn id_at(&self, channel: usize) -> Option<CategoryId> {
        self.categories.get(channel).map(|c| c.id)
    }

    /// Number of things and stuff categories (freespace excluded).
    pub fn counts(&self) -> (usize, usize) {
        let things = self.iter().filter(|c| c.kind == CategoryKind::Things).count();
        let stuff = self.iter().filter(|c| c.kind == CategoryKind::Stuff).count();
        (things, stuff)
    }
}

impl TryFrom<Vec<Category>> for CategoryTable {
    type Error = crate::Error;

    fn try_from(v: Vec<Category>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CategoryTable> for Vec<Category> {
    fn from(t: CategoryTable) -> Self {
        t.categories
    }
}
