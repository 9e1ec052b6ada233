//! Prefix prompts for the two-stage in-context order extraction.
//! `[DESCRIPTION]` is replaced by the text to parse.

pub const PLACEHOLDER: &str = "[DESCRIPTION]";

/// Summarizes a description and names its target object.
pub const FIRST_STAGE: &str = "I have some descriptions, each describing a specific target object in a room. However, they may have some redundant clauses or words. Your task is to summarize them into a shorter description. Also, tell me what the target object.
Below are 10 examples:
description 1: Assume you are facing the door in the room. Find the larger cabinet to its left.
summarized description 1: When facing the door, the cabinet on the right of it.
target object 1: cabinet

description 2: The water bottle that is above the easy chair. NOT the smaller water bottle that is above the orange table.
summarized description 2: The water bottle that is above the easy chair.
target object 2: water bottle

description 3: In the bedroom, you will see a sheer curtain. Beside the curtain is the steel window you need to find.
summarized description 3: The steel window beside a sheer curtain.
target object 3: window

description 4: Please find the towel hanging on the wall in the bathroom with the other three towels. You should find the one nearest to the door. Or say it is on the door\u{2019}s right side.
summarized description 4: The towel on the wall nearest to the door.
target object 4: towel

description 5: Between a pencil and a desk lamp on the desk is the backpack you need to find.
summarized description 5: The backpack between a pencil and a desk lamp on the desk.
target object 5: backpack

description 6: In the living room we have three bookshelves. Choose the bookshelf to the right of the clock facing a cabinet.
summarized description 6: The bookshelf to the right of the clock faces a cabinet.
target object 6: bookshelf

description 7: The person wearing a white T-shirt, not the man who is also sitting on the bed but with a jacket.
summarized description 7: The person wearing a white T-shirt on a bed.
target object 7: person

description 8: The purple pillow on the right side of the bed when facing it. Not the one on the left side and the one in the middle of the bed.
summarized description 8: The purple pillow on the right side of the bed when facing it.
target object 8: pillow

description 9: The brown door at the end of the living room, next to the trash cans, which are full of garbage.
summarized description 9: The brown door next to the full trash can.
target object 9: door

description 10: The shoes that are placed in the middle of five shoes near the door in the room.
summarized description 10: The middle shoes near the door.
target object 10: shoes
Now for the description [DESCRIPTION], give me the summarized description and the target object. Your answer must be in the form \"summarized description:
target object:\"";

/// Produces the anchor-to-target order for a summarized description.
pub const SECOND_STAGE: &str = "I have some descriptions, each describing a specific target object with some supporting anchor objects helping the localization. We can find the specific target object by tracing the referential order of anchor objects step by step. Your task is to provide a correct referential order. Also, tell me what the mentioned anchor objects.
Below are 10 examples:
description 1: The water bottle that is above the easy chair.
target object 1: water bottle
anchor objects 1: easy chair
referential order 1: easy chair\u{2192}water bottle

description 2: The steel window beside a sheer curtain.
target object 2: window
anchor objects 2: curtain
referential order 2: curtain\u{2192}window

description 3: The trash can that is on the right of the king-size bed.
target object 3: trash can
anchor objects 3: bed
referential order 3: bed\u{2192}trash can

description 4: The backpack between a pencil and a desk lamp. They are all on a wooden desk.
target object 4: backpack
anchor objects 4: pencil, desk lamp, desk
referential order 4: desk\u{2192}pencil\u{2192}desk lamp\u{2192}backpack

description 5: The cabinet on the right of the door.
target object 5: cabinet
anchor objects 5: door
referential order 5: door\u{2192}cabinet

description 6: The bookshelf to the right of the clock facing a cabinet.
target object 6: bookshelf
anchor objects 6: clock, cabinet
referential order 6: cabinet\u{2192}clock\u{2192}bookshelf

description 7: The person wearing a white T-shirt on a bed.
target object 7: person
anchor objects 7: bed
referential order 7: bed\u{2192}person

description 8: The purple pillow on the right side of the bed when facing it.
target object 8: pillow
anchor objects 8: bed
referential order 8: bed\u{2192}pillow

description 9: The brown door next to the full trash can.
target object 9: door
anchor objects 9: trash can
referential order 9: trash can\u{2192}door

description 10: Please find the towel hanging on the wall in the bathroom with the other three towels. You should find the one nearest to the door. Or say it is on the door\u{2019}s right side.
target object 10: towel
anchor objects 10: wall, door
referential order 10: wall\u{2192}door\u{2192}towel

Now for the description: [DESCRIPTION], give me the anchor objects and the referential order. Your answer must be in the form \"referential order, anchor objects:. \"";

pub fn first_stage(description: &str) -> String {
    FIRST_STAGE.replace(PLACEHOLDER, description)
}

pub fn second_stage(summary: &str) -> String {
    SECOND_STAGE.replace(PLACEHOLDER, summary)
}
